use depthcut_core::ContainerError;
use depthcut_model::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeError {
    #[error("config error: {0}")]
    Config(String),
    #[error("compile error: {0}")]
    Compile(String),
    #[error("synchronization error at op {node}: operand levels {left} and {right}")]
    Sync { node: usize, left: i64, right: i64 },
    #[error("scale error at op {node}: {msg}")]
    Scale { node: usize, msg: String },
    #[error("depleted level at op {node}: {msg}")]
    Level { node: usize, msg: String },
    #[error("argument error: {0}")]
    Argument(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("unsupported depth: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T> = std::result::Result<T, HeError>;

pub(crate) fn config_err(msg: impl Into<String>) -> HeError {
    HeError::Config(msg.into())
}
