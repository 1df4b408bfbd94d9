//! Synthetic training data: phantom subjects, corruption models, inpainting masks,
//! and the episode sampler.

pub mod corrupt;
mod episode;
pub mod fft;
pub mod perlin;
pub mod phantom;
pub mod resample;

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use episode::{Batch, Episode, EpisodeInfo, Pair, Sampler, TaskPins, INPUT_CHANNELS};
pub use phantom::{generate_phantom, PhantomConfig, PhantomSubject, SubjectPool};

use crate::error::{config_err, Error, Result};
use crate::losses::LossKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Segmentation,
    ModalityTransfer,
    SuperResolution,
    SkullStripping,
    MotionRecon,
    UndersampledRecon,
    DenoiseBias,
    Inpainting,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        Self::Segmentation,
        Self::ModalityTransfer,
        Self::SuperResolution,
        Self::SkullStripping,
        Self::MotionRecon,
        Self::UndersampledRecon,
        Self::DenoiseBias,
        Self::Inpainting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Segmentation => "segmentation",
            Self::ModalityTransfer => "modality_transfer",
            Self::SuperResolution => "super_resolution",
            Self::SkullStripping => "skull_stripping",
            Self::MotionRecon => "motion_recon",
            Self::UndersampledRecon => "undersampled_recon",
            Self::DenoiseBias => "denoise_bias",
            Self::Inpainting => "inpainting",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }

    /// Dice for mask targets, weighted MSE for intensity targets.
    pub fn loss_kind(self) -> LossKind {
        match self {
            Self::Segmentation | Self::SkullStripping => LossKind::Dice,
            _ => LossKind::Mse,
        }
    }

    /// Tasks whose target is a clean version of the (single-modality) input.
    pub fn is_restoration(self) -> bool {
        matches!(
            self,
            Self::SuperResolution
                | Self::MotionRecon
                | Self::UndersampledRecon
                | Self::DenoiseBias
                | Self::Inpainting
        )
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind {s:?}")))
    }
}

/// Relative sampling weight of each task kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskWeights {
    pub segmentation: f64,
    pub modality_transfer: f64,
    pub super_resolution: f64,
    pub skull_stripping: f64,
    pub motion_recon: f64,
    pub undersampled_recon: f64,
    pub denoise_bias: f64,
    pub inpainting: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            segmentation: 2.0,
            modality_transfer: 2.0,
            super_resolution: 1.0,
            skull_stripping: 0.5,
            motion_recon: 0.5,
            undersampled_recon: 1.0,
            denoise_bias: 0.5,
            inpainting: 1.0,
        }
    }
}

impl TaskWeights {
    /// Weight 1 on `kind`, 0 elsewhere.
    pub fn only(kind: TaskKind) -> Self {
        let mut w = Self::uniform(0.0);
        *w.get_mut(kind) = 1.0;
        w
    }

    pub fn uniform(v: f64) -> Self {
        Self {
            segmentation: v,
            modality_transfer: v,
            super_resolution: v,
            skull_stripping: v,
            motion_recon: v,
            undersampled_recon: v,
            denoise_bias: v,
            inpainting: v,
        }
    }

    pub fn get(&self, kind: TaskKind) -> f64 {
        self.as_array()[kind.index()]
    }

    pub fn get_mut(&mut self, kind: TaskKind) -> &mut f64 {
        match kind {
            TaskKind::Segmentation => &mut self.segmentation,
            TaskKind::ModalityTransfer => &mut self.modality_transfer,
            TaskKind::SuperResolution => &mut self.super_resolution,
            TaskKind::SkullStripping => &mut self.skull_stripping,
            TaskKind::MotionRecon => &mut self.motion_recon,
            TaskKind::UndersampledRecon => &mut self.undersampled_recon,
            TaskKind::DenoiseBias => &mut self.denoise_bias,
            TaskKind::Inpainting => &mut self.inpainting,
        }
    }

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.segmentation,
            self.modality_transfer,
            self.super_resolution,
            self.skull_stripping,
            self.motion_recon,
            self.undersampled_recon,
            self.denoise_bias,
            self.inpainting,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return config_err(format!(
                "task weights must be finite and non-negative: {self:?}"
            ));
        }
        if w.iter().all(|&v| v == 0.0) {
            return config_err("task weights are all zero");
        }
        Ok(())
    }
}

/// What is excluded from training. Held-out tasks are never sampled, held-out
/// modalities never appear in any image, held-out classes are never targeted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Holdout {
    pub tasks: Vec<TaskKind>,
    pub modalities: Vec<usize>,
    pub classes: Vec<u8>,
}

impl Holdout {
    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty() && self.modalities.is_empty() && self.classes.is_empty()
    }

    /// Merge a `task:<kind>`, `modality:<id>` or `class:<id>` item.
    pub fn add_spec(&mut self, spec: &str) -> Result<()> {
        let (what, value) = spec.split_once(':').ok_or_else(|| {
            Error::Config(format!("holdout {spec:?} is not of the form kind:value"))
        })?;
        let bad = |_| Error::Config(format!("bad holdout value in {spec:?}"));
        match what {
            "task" => self.tasks.push(value.parse()?),
            "modality" => self.modalities.push(value.parse().map_err(bad)?),
            "class" => self.classes.push(value.parse().map_err(bad)?),
            _ => {
                return config_err(format!(
                    "unknown holdout kind {what:?} (task, modality or class)"
                ))
            }
        }
        Ok(())
    }

    /// Whether episodes of `kind` under `pins` touch anything held out.
    pub fn covers(&self, kind: TaskKind, pins: &TaskPins) -> bool {
        let mods = pins
            .modalities
            .iter()
            .flatten()
            .chain(&pins.target_modality);
        self.tasks.contains(&kind)
            || mods.into_iter().any(|m| self.modalities.contains(m))
            || pins
                .classes
                .iter()
                .flatten()
                .any(|c| self.classes.contains(c))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self
            .modalities
            .iter()
            .find(|&&m| m >= phantom::N_MODALITIES)
        {
            return config_err(format!("held-out modality {m} does not exist"));
        }
        if let Some(c) = self
            .classes
            .iter()
            .find(|c| !phantom::SEGMENTABLE.contains(c))
        {
            return config_err(format!("held-out class {c} is not a segmentable label"));
        }
        Ok(())
    }
}

impl FromStr for Holdout {
    type Err = Error;

    /// Comma-separated list of holdout items.
    fn from_str(s: &str) -> Result<Self> {
        let mut h = Holdout::default();
        for item in s.split(',').filter(|t| !t.is_empty()) {
            h.add_spec(item.trim())?;
        }
        Ok(h)
    }
}

impl fmt::Display for Holdout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> = self
            .tasks
            .iter()
            .map(|t| format!("task:{t}"))
            .chain(self.modalities.iter().map(|m| format!("modality:{m}")))
            .chain(self.classes.iter().map(|c| format!("class:{c}")))
            .collect();
        f.write_str(&items.join(","))
    }
}

/// Where the context subjects come from relative to the input subject's site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Every context subject shares the input's dataset.
    SameAsInput,
    /// Each context subject's dataset is drawn from the valid datasets.
    Random,
    /// No context subject shares the input's dataset.
    ExcludeInput,
}

impl ContextMode {
    pub const ALL: [ContextMode; 3] = [Self::SameAsInput, Self::Random, Self::ExcludeInput];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub task_weights: TaskWeights,
    /// Context sizes are drawn uniformly from `1..=context_max`.
    pub context_max: usize,
    /// Probabilities of [`ContextMode::SameAsInput`], `Random`, `ExcludeInput`.
    pub mixing_probs: [f64; 3],
    pub holdout: Holdout,
    pub phantom: PhantomConfig,
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub test_subjects: usize,
    /// Lattice spacing of the inpainting noise.
    pub perlin_cell: usize,
    /// Corruption severity range for the restoration tasks.
    pub severity_range: [f64; 2],
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            task_weights: TaskWeights::default(),
            context_max: 8,
            mixing_probs: [1.0 / 3.0; 3],
            holdout: Holdout::default(),
            phantom: PhantomConfig::default(),
            train_subjects: 240,
            val_subjects: 80,
            test_subjects: 80,
            perlin_cell: 8,
            severity_range: [0.3, 1.0],
        }
    }
}

/// First subject id of each split, far enough apart that splits never overlap.
pub const TRAIN_ID_BASE: u64 = 0;
pub const VAL_ID_BASE: u64 = 1 << 32;
pub const TEST_ID_BASE: u64 = 2 << 32;

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.task_weights.validate()?;
        self.phantom.validate()?;
        self.holdout.validate()?;
        if self.context_max == 0 {
            return config_err("context_max must be at least 1");
        }
        let p = self.mixing_probs;
        if p.iter().any(|v| !v.is_finite() || *v < 0.0)
            || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return config_err(format!(
                "mixing_probs must be non-negative and sum to 1: {p:?}"
            ));
        }
        if TaskKind::ALL
            .iter()
            .all(|&k| self.task_weights.get(k) == 0.0 || self.holdout.tasks.contains(&k))
        {
            return config_err("holdout removes every task with positive weight");
        }
        if self.perlin_cell == 0 || self.phantom.image_size % self.perlin_cell != 0 {
            return config_err(format!(
                "perlin_cell {} must divide image_size {}",
                self.perlin_cell, self.phantom.image_size
            ));
        }
        let [lo, hi] = self.severity_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return config_err(format!(
                "severity_range {:?} must lie in [0, 1]",
                self.severity_range
            ));
        }
        Ok(())
    }

    pub fn train_pool(&self) -> Result<SubjectPool> {
        SubjectPool::generate(TRAIN_ID_BASE, self.train_subjects, &self.phantom)
    }

    pub fn val_pool(&self) -> Result<SubjectPool> {
        SubjectPool::generate(VAL_ID_BASE, self.val_subjects, &self.phantom)
    }

    pub fn test_pool(&self) -> Result<SubjectPool> {
        SubjectPool::generate(TEST_ID_BASE, self.test_subjects, &self.phantom)
    }
}

/// Categorical draw proportional to `weights`, skipping held-out tasks.
pub fn sample_task_kind(
    weights: &TaskWeights,
    holdout: &Holdout,
    rng: &mut impl Rng,
) -> Result<TaskKind> {
    weights.validate()?;
    let w = TaskKind::ALL.map(|k| {
        if holdout.tasks.contains(&k) {
            0.0
        } else {
            weights.get(k)
        }
    });
    let dist = WeightedIndex::new(w).map_err(|e| Error::Config(format!("task weights: {e}")))?;
    Ok(TaskKind::ALL[dist.sample(rng)])
}
