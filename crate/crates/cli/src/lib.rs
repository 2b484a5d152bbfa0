//! Command-line orchestration of a full run: synthetic data, teacher
//! training, linearization, distillation, compilation, encrypted simulation
//! and reporting, each phase reading the previous phase's artifact.

pub mod config;
mod error;
pub mod log;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use pipeline::{artifact, Phase, Run, SimulationSummary};
pub use report::{profile_line, FinalReport};
