use super::ModelConfig;

/// Parameter count and per-example convolution cost of one forward pass.
///
/// Only convolutions are counted; activations, resizing, additions and averaging
/// are lower order and left out. Bias additions are not counted as MACs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl Cost {
    /// `2 * macs`.
    pub fn flops(&self) -> f64 {
        2.0 * self.macs as f64
    }

    /// Add one convolution applied to `copies` feature maps of `pixels` pixels each.
    fn conv(&mut self, cin: usize, cout: usize, k: usize, pixels: usize, copies: usize) {
        let w = (cout * cin * k * k) as u64;
        self.params += w + cout as u64;
        self.macs += w * pixels as u64 * copies as u64;
    }

    fn res_unit(&mut self, c: usize, pixels: usize, copies: usize) {
        self.conv(c, c, 3, pixels, copies);
        self.conv(c, c, 3, pixels, copies);
    }
}

/// Neuralizer cost for one target image and `context_size` context pairs.
pub fn neuralizer_cost(cfg: &ModelConfig, context_size: usize) -> Cost {
    let (c, n) = (cfg.channels, context_size);
    let side = |s: usize| cfg.image_size >> s;
    let full = side(0) * side(0);
    let mut cost = Cost::default();
    cost.conv(cfg.in_channels, c, 1, full, 1);
    cost.conv(cfg.ctx_pair_channels, c, 1, full, n);
    for s in cfg.block_scales() {
        let px = side(s) * side(s);
        cost.res_unit(c, px, 1);
        cost.res_unit(c, px, n);
        cost.conv(2 * c, c, 1, px, n);
        cost.conv(2 * c, c, 1, px, n);
    }
    cost.res_unit(c, full, 1);
    cost.conv(c, cfg.out_channels, 1, full, 1);
    cost
}

pub fn baseline_cost(cfg: &ModelConfig) -> Cost {
    let w = cfg.channels;
    let side = |s: usize| cfg.image_size >> s;
    let mut cost = Cost::default();
    cost.conv(cfg.in_channels, w, 1, side(0) * side(0), 1);
    for s in 0..cfg.stages {
        cost.res_unit(w, side(s) * side(s), 1);
    }
    for s in (0..cfg.stages - 1).rev() {
        cost.conv(2 * w, w, 1, side(s) * side(s), 1);
        cost.res_unit(w, side(s) * side(s), 1);
    }
    cost.conv(w, cfg.out_channels, 1, side(0) * side(0), 1);
    cost
}

/// `(parameter count, inference FLOPs)` of the Neuralizer with `context_size` context pairs.
pub fn count_params_flops(cfg: &ModelConfig, context_size: usize) -> (u64, f64) {
    let c = neuralizer_cost(cfg, context_size);
    (c.params, c.flops())
}
