use depthcut_core::{ContainerError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("{phase} diverged at epoch {epoch} step {step}: {reason}")]
    Diverged {
        phase: &'static str,
        epoch: usize,
        step: usize,
        reason: String,
    },
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn config_err(msg: impl Into<String>) -> ModelError {
    ModelError::Config(msg.into())
}
