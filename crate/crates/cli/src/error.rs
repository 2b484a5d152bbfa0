use std::path::PathBuf;

use depthcut_core::ContainerError;
use depthcut_he::HeError;
use depthcut_model::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {name} at {path}; it is written by phase {producer}")]
    MissingArtifact {
        name: String,
        path: PathBuf,
        producer: &'static str,
    },
    #[error("phase {phase} failed: {msg}")]
    Phase { phase: &'static str, msg: String },
    #[error("invariant violated in {phase}: {msg}")]
    Invariant { phase: &'static str, msg: String },
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } | CliError::Phase { .. } => 3,
            CliError::Invariant { .. } => 4,
        }
    }

    pub fn phase(phase: &'static str, msg: impl std::fmt::Display) -> Self {
        CliError::Phase {
            phase,
            msg: msg.to_string(),
        }
    }

    pub fn invariant(phase: &'static str, msg: impl Into<String>) -> Self {
        CliError::Invariant {
            phase,
            msg: msg.into(),
        }
    }

    /// Model errors from bad hyperparameters are config errors; the rest
    /// fail the phase.
    pub fn from_model(phase: &'static str, e: ModelError) -> Self {
        match e {
            ModelError::Config(msg) => CliError::Config(msg),
            e => CliError::phase(phase, e),
        }
    }

    pub fn from_he(phase: &'static str, e: HeError) -> Self {
        match e {
            HeError::Config(msg) => CliError::Config(msg),
            HeError::Model(e) => CliError::from_model(phase, e),
            e => CliError::phase(phase, e),
        }
    }

    pub fn io(phase: &'static str, path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::phase(phase, format!("{}: {e}", path.display()))
    }

    pub fn container(phase: &'static str, e: ContainerError) -> Self {
        CliError::phase(phase, e)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
