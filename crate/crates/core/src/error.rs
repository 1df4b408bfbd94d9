use thiserror::Error;

use crate::tensor::TensorError;

/// Errors from data generation, training, evaluation and persistence.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data generation failed: {0}")]
    Data(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::Config(detail.into()))
}

pub(crate) fn data_err<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::Data(detail.into()))
}
