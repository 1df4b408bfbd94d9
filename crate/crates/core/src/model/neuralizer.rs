use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Block, Conv, ResUnit};
use super::params::ParamStore;
use super::ModelConfig;
use crate::tensor::{Float, Result, Tape, Tensor, TensorError, Var};

/// The context-conditioned network: two embeddings, a U-shaped stack of
/// Pairwise-Conv-Avg blocks, and a residual head mapping to one output channel.
#[derive(Debug, Clone)]
pub struct Neuralizer<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    e_x: Conv,
    e_c: Conv,
    blocks: Vec<Block>,
    head_res: ResUnit,
    head_out: Conv,
}

impl<F: Float> Neuralizer<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let e_x = Conv::new(&mut params, &mut rng, "e_x", config.in_channels, c, 1);
        let e_c = Conv::new(&mut params, &mut rng, "e_c", config.ctx_pair_channels, c, 1);
        let blocks = (0..config.block_scales().len())
            .map(|i| Block::new(&mut params, &mut rng, &format!("block{i}"), c))
            .collect();
        let head_res = ResUnit::new(&mut params, &mut rng, "head.res", c);
        let head_out = Conv::new(&mut params, &mut rng, "head.out", c, config.out_channels, 1);
        Ok(Self {
            config: config.clone(),
            params,
            e_x,
            e_c,
            blocks,
            head_res,
            head_out,
        })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> (ResUnit, Conv) {
        (self.head_res, self.head_out)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn cast<G: Float>(&self) -> Neuralizer<G> {
        Neuralizer {
            config: self.config.clone(),
            params: self.params.cast(),
            e_x: self.e_x,
            e_c: self.e_c,
            blocks: self.blocks.clone(),
            head_res: self.head_res,
            head_out: self.head_out,
        }
    }

    /// Embed the target input and every context pair to `c` channels.
    ///
    /// `x` is `[B, in, H, W]`; `ctx` is `[N, B, in + out, H, W]` holding the
    /// channel-concatenated context pairs. Returns `r_x` as `[B, c, H, W]` and the
    /// context representations as `[N, B, c, H, W]`.
    pub fn embed_on<'t>(
        &self,
        p: &[Var<'t, F>],
        x: &Var<'t, F>,
        ctx: &Var<'t, F>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let (xs, cs) = (x.shape(), ctx.shape());
        self.config.check_input(&xs)?;
        if cs.len() != 5
            || cs[0] == 0
            || cs[1] != xs[0]
            || cs[2] != self.config.ctx_pair_channels
            || cs[3..] != xs[2..]
        {
            return Err(TensorError::Shape {
                op: "Neuralizer::embed",
                detail: format!("context {cs:?} does not fit input {xs:?}"),
            });
        }
        let rx = self.e_x.apply(p, x)?;
        let rc = self
            .e_c
            .apply(p, &ctx.reshape(vec![cs[0] * cs[1], cs[2], cs[3], cs[4]])?)?;
        let c = self.config.channels;
        Ok((rx, rc.reshape(vec![cs[0], cs[1], c, cs[3], cs[4]])?))
    }

    /// Forward pass on bound parameters `p`; inputs as for [`Self::embed_on`].
    /// Returns linear outputs `[B, out, H, W]`.
    pub fn forward_on<'t>(
        &self,
        p: &[Var<'t, F>],
        x: &Var<'t, F>,
        ctx: &Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let (mut rx, rc) = self.embed_on(p, x, ctx)?;
        let s = rc.shape();
        let n = s[0];
        let mut rc = rc.reshape(vec![n * s[1], s[2], s[3], s[4]])?;

        let scales = self.config.block_scales();
        let bottom = self.config.stages - 1;
        let mut skips = Vec::with_capacity(bottom);
        for (i, (block, &s)) in self.blocks.iter().zip(&scales).enumerate() {
            let (bx, bc) = block.apply(p, &rx, &rc, n)?;
            let descending = i < bottom;
            if descending {
                rx = bx.down2()?;
                rc = bc.down2()?;
                skips.push((bx, bc));
            } else if s > 0 {
                let (sx, sc) = skips.pop().expect("one skip per encoder level");
                rx = bx.up2()?.add(&sx)?;
                rc = bc.up2()?.add(&sc)?;
            } else {
                rx = bx;
            }
        }
        let h = self.head_res.apply(p, &rx)?;
        self.head_out.apply(p, &h)
    }

    /// Inference on plain tensors with a throwaway tape.
    pub fn predict(&self, x: &Tensor<F>, ctx: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward_on(&p, &tape.constant(x.clone()), &tape.constant(ctx.clone()))?;
        Ok((*out.value()).clone())
    }
}
