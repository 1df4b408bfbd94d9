//! The JSON run configuration and its on-disk layout.

use std::path::{Path, PathBuf};

use neuralizer::augment::AugTree;
use neuralizer::datagen::SamplerConfig;
use neuralizer::evaluate::EvalConfig;
use neuralizer::model::ModelConfig;
use neuralizer::train::{BaselineSpec, RunSetup, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "NEURALIZER_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Checkpoints, history and the materialized config of a training run.
    pub run_dir: PathBuf,
    /// Reports and montages of an evaluation.
    pub eval_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            eval_dir: PathBuf::from("runs/eval"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub augment_tree: AugTree,
    pub eval: EvalConfig,
    pub paths: Paths,
    pub seed: u64,
    /// Set by `train --baseline`; absent for Neuralizer runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            augment_tree: AugTree::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
            seed: 0,
            baseline: None,
        }
    }
}

impl RunConfig {
    /// Parse a config file, then apply the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    /// The file at `path` if given, the defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let mut cfg = Self::default();
                cfg.apply_env()?;
                Ok(cfg)
            }
        }
    }

    fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn setup(&self) -> RunSetup {
        RunSetup {
            model: self.model.clone(),
            sampler: self.sampler.clone(),
            train: self.train.clone(),
            augment: self.augment_tree.clone(),
            seed: self.seed,
            baseline: self.baseline.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
