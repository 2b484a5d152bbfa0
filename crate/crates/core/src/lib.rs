//! Float64 tensors with a reverse-mode tape, the op set used by the skeleton
//! models, finite-difference checking, and the shared artifact container.

pub mod container;
mod error;
pub mod gradcheck;
mod ops;
pub mod seed;
mod tape;
mod tensor;

pub use container::{Container, ContainerError};
pub use error::{Result, TensorError};
pub use ops::{bn_affine, sigmoid, softplus, BatchStats, BnMode};
pub use tape::{CustomCtx, CustomOp, Grads, Tape, Var};
pub use tensor::Tensor;
