use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("config error in {op}: {msg}")]
    Config { op: &'static str, msg: String },

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("numeric error in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    #[error("tape error: {0}")]
    Tape(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Config {
            op,
            msg: msg.into(),
        }
    }
}
