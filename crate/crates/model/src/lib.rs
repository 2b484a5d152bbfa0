//! Spatio-temporal graph convolutional networks over skeleton sequences,
//! with node-wise removal of non-linear sites and polynomial replacement of
//! the survivors under distillation from a ReLU teacher.

pub mod act;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
mod error;
pub mod graph;
pub mod linearize;
pub mod mask;
pub mod net;
pub mod params;
pub mod train;

pub use act::{ActivationPlan, SiteActivation};
pub use checkpoint::Checkpoint;
pub use config::{Partitioning, StgcnConfig};
pub use data::{synth_dataset, Dataset, SynthSpec};
pub use error::{ModelError, Result};
pub use graph::SkeletonGraph;
pub use mask::Mask;
pub use net::{ForwardOut, Mode, Stgcn};
pub use params::ModelParams;
