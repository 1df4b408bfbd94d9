use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use crate::tensor::{Float, Result, Tensor, Var};

/// Same-padded convolution with a per-channel bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pad: usize,
}

impl Conv {
    pub(crate) fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        Self::with_gain(store, rng, name, cin, cout, k, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn with_gain<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
    ) -> Self {
        let kernel = store.add_kernel(format!("{name}.k"), [cout, cin, k, k], gain, rng);
        let bias = store.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        Self {
            kernel,
            bias,
            pad: k / 2,
        }
    }

    pub fn apply<'t, F: Float>(&self, p: &[Var<'t, F>], x: &Var<'t, F>) -> Result<Var<'t, F>> {
        x.conv2d(&p[self.kernel.0], &p[self.bias.0], self.pad)
    }
}

/// Init gain of the last convolution on a residual branch. At full He scale the
/// activations grow about 2.5x per unit and the untrained output reaches ~1e3.
pub(crate) const RESIDUAL_GAIN: f64 = 0.1;

/// `gelu(x + conv3(gelu(conv3(x))))`.
#[derive(Debug, Clone, Copy)]
pub struct ResUnit {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResUnit {
    pub(crate) fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
    ) -> Self {
        Self {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), c, c, 3),
            conv2: Conv::with_gain(store, rng, &format!("{name}.conv2"), c, c, 3, RESIDUAL_GAIN),
        }
    }

    pub fn apply<'t, F: Float>(&self, p: &[Var<'t, F>], x: &Var<'t, F>) -> Result<Var<'t, F>> {
        let h = self.conv1.apply(p, x)?.gelu();
        let h = self.conv2.apply(p, &h)?;
        Ok(x.add(&h)?.gelu())
    }
}

/// Pairwise-Conv-Avg block.
///
/// The target stream is `[B, c, H, W]`; the context stream is stored flat as
/// `[N * B, c, H, W]` with the set index outermost.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub res_x: ResUnit,
    pub res_c: ResUnit,
    pub k_x: Conv,
    pub k_c: Conv,
}

impl Block {
    pub(crate) fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
    ) -> Self {
        Self {
            res_x: ResUnit::new(store, rng, &format!("{name}.res_x"), c),
            res_c: ResUnit::new(store, rng, &format!("{name}.res_c"), c),
            k_x: Conv::with_gain(
                store,
                rng,
                &format!("{name}.k_x"),
                2 * c,
                c,
                1,
                RESIDUAL_GAIN,
            ),
            k_c: Conv::with_gain(
                store,
                rng,
                &format!("{name}.k_c"),
                2 * c,
                c,
                1,
                RESIDUAL_GAIN,
            ),
        }
    }

    pub fn apply<'t, F: Float>(
        &self,
        p: &[Var<'t, F>],
        rx: &Var<'t, F>,
        rc: &Var<'t, F>,
        n: usize,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let rx_int = self.res_x.apply(p, rx)?;
        let rc_int = self.res_c.apply(p, rc)?;
        let xs = rx_int.shape();
        let flat: Vec<usize> = [n * xs[0]]
            .into_iter()
            .chain(xs[1..].iter().copied())
            .collect();
        let pairs = rx_int
            .repeat_set(n)?
            .reshape(flat)?
            .concat_channels(&rc_int)?;

        let set: Vec<usize> = [n].into_iter().chain(xs.iter().copied()).collect();
        let to_x = self.k_x.apply(p, &pairs)?.reshape(set)?.mean_over_set()?;
        let rx_out = rx_int.add(&to_x)?;
        let rc_out = rc_int.add(&self.k_c.apply(p, &pairs)?)?;
        Ok((rx_out, rc_out))
    }
}
