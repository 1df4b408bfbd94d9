use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, ResUnit};
use super::params::ParamStore;
use super::ModelConfig;
use crate::tensor::{Float, Result, Tape, Tensor, Var};

/// Task-specific U-Net without context input: one residual unit per stage,
/// concatenated skips merged back to width `w` by a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct BaselineUNet<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    stem: Conv,
    down: Vec<ResUnit>,
    bottleneck: ResUnit,
    merge: Vec<Conv>,
    up: Vec<ResUnit>,
    head: Conv,
}

impl<F: Float> BaselineUNet<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let w = config.channels;
        let levels = config.stages - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stem = Conv::new(&mut params, &mut rng, "stem", config.in_channels, w, 1);
        let down = (0..levels)
            .map(|s| ResUnit::new(&mut params, &mut rng, &format!("down{s}"), w))
            .collect();
        let bottleneck = ResUnit::new(&mut params, &mut rng, "bottleneck", w);
        let mut merge = Vec::with_capacity(levels);
        let mut up = Vec::with_capacity(levels);
        for s in (0..levels).rev() {
            merge.push(Conv::new(
                &mut params,
                &mut rng,
                &format!("merge{s}"),
                2 * w,
                w,
                1,
            ));
            up.push(ResUnit::new(&mut params, &mut rng, &format!("up{s}"), w));
        }
        let head = Conv::new(&mut params, &mut rng, "head", w, config.out_channels, 1);
        Ok(Self {
            config: config.clone(),
            params,
            stem,
            down,
            bottleneck,
            merge,
            up,
            head,
        })
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

    pub fn cast<G: Float>(&self) -> BaselineUNet<G> {
        BaselineUNet {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem,
            down: self.down.clone(),
            bottleneck: self.bottleneck,
            merge: self.merge.clone(),
            up: self.up.clone(),
            head: self.head,
        }
    }

    pub fn forward_on<'t>(&self, p: &[Var<'t, F>], x: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.config.check_input(&x.shape())?;
        let mut h = self.stem.apply(p, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for unit in &self.down {
            let s = unit.apply(p, &h)?;
            h = s.down2()?;
            skips.push(s);
        }
        h = self.bottleneck.apply(p, &h)?;
        for (merge, unit) in self.merge.iter().zip(&self.up) {
            let skip = skips.pop().expect("one skip per level");
            let joined = skip.concat_channels(&h.up2()?)?;
            h = unit.apply(p, &merge.apply(p, &joined)?)?;
        }
        self.head.apply(p, &h)
    }

    pub fn predict(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward_on(&p, &tape.constant(x.clone()))?;
        Ok((*out.value()).clone())
    }
}
