//! Network definitions: the Neuralizer, the task-specific baseline U-Net,
//! parameter storage, and analytic size/cost accounting.

mod baseline;
mod cost;
mod layers;
mod neuralizer;
mod params;

pub use baseline::BaselineUNet;
pub use cost::{baseline_cost, count_params_flops, neuralizer_cost, Cost};
pub use layers::{Block, Conv, ResUnit};
pub use neuralizer::Neuralizer;
pub use params::{ParamId, ParamStore};

use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Result, Tensor, TensorError, Var};

/// Width and geometry shared by both architectures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub stages: usize,
    pub in_channels: usize,
    pub ctx_pair_channels: usize,
    pub out_channels: usize,
    pub image_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            stages: 4,
            in_channels: 3,
            ctx_pair_channels: 4,
            out_channels: 1,
            image_size: 32,
        }
    }
}

impl ModelConfig {
    /// The configuration used for the published size and cost figures.
    pub fn paper() -> Self {
        Self {
            channels: 64,
            image_size: 192,
            ..Self::default()
        }
    }

    fn invalid(detail: String) -> TensorError {
        TensorError::Invalid {
            op: "ModelConfig",
            detail,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Self::invalid(format!(
                "channels must be at least 2, got {}",
                self.channels
            )));
        }
        if self.stages == 0 || self.stages > 8 {
            return Err(Self::invalid(format!(
                "stages must be in 1..=8, got {}",
                self.stages
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Self::invalid(
                "in_channels and out_channels must be positive".into(),
            ));
        }
        if self.ctx_pair_channels != self.in_channels + self.out_channels {
            return Err(Self::invalid(format!(
                "ctx_pair_channels {} != in_channels {} + out_channels {}",
                self.ctx_pair_channels, self.in_channels, self.out_channels
            )));
        }
        let f = self.size_multiple();
        if self.image_size == 0 || self.image_size % f != 0 {
            return Err(Self::invalid(format!(
                "image_size {} is not a positive multiple of {f}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.stages - 1)
    }

    /// Resolution level of each block: down to the bottleneck and back, e.g. `[0,1,2,3,2,1,0]`.
    pub fn block_scales(&self) -> Vec<usize> {
        let b = self.stages - 1;
        (0..b).chain((0..=b).rev()).collect()
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.size_multiple();
        if shape.len() != 4 || shape[0] == 0 || shape[1] != self.in_channels {
            return Err(TensorError::Shape {
                op: "forward",
                detail: format!("input {shape:?}, expected [B, {}, H, W]", self.in_channels),
            });
        }
        if shape[2] == 0 || shape[3] == 0 || shape[2] % f != 0 || shape[3] % f != 0 {
            return Err(TensorError::Invalid {
                op: "forward",
                detail: format!(
                    "spatial extent {}x{} not divisible by {f}",
                    shape[2], shape[3]
                ),
            });
        }
        Ok(())
    }
}

/// Which architecture a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Neuralizer,
    Baseline,
}

/// Either architecture, for code paths (training, checkpoints) that handle both.
#[derive(Debug, Clone)]
pub enum Model<F> {
    Neuralizer(Neuralizer<F>),
    Baseline(BaselineUNet<F>),
}

impl<F: Float> Model<F> {
    pub fn new(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::Neuralizer => Model::Neuralizer(Neuralizer::new(config, seed)?),
            ModelKind::Baseline => Model::Baseline(BaselineUNet::new(config, seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Neuralizer(_) => ModelKind::Neuralizer,
            Model::Baseline(_) => ModelKind::Baseline,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Neuralizer(m) => m.config(),
            Model::Baseline(m) => m.config(),
        }
    }

    pub fn params(&self) -> &ParamStore<F> {
        match self {
            Model::Neuralizer(m) => m.params(),
            Model::Baseline(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        match self {
            Model::Neuralizer(m) => m.params_mut(),
            Model::Baseline(m) => m.params_mut(),
        }
    }

    pub fn forward_on<'t>(
        &self,
        p: &[Var<'t, F>],
        x: &Var<'t, F>,
        ctx: &Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        match self {
            Model::Neuralizer(m) => m.forward_on(p, x, ctx),
            Model::Baseline(m) => m.forward_on(p, x),
        }
    }

    /// Inference; the baseline ignores `ctx`.
    pub fn predict(&self, x: &Tensor<F>, ctx: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Model::Neuralizer(m) => m.predict(x, ctx),
            Model::Baseline(m) => m.predict(x),
        }
    }

    pub fn cost(&self, context_size: usize) -> Cost {
        match self {
            Model::Neuralizer(m) => neuralizer_cost(m.config(), context_size),
            Model::Baseline(m) => baseline_cost(m.config()),
        }
    }
}
