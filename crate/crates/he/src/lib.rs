//! Leveled homomorphic-encryption compilation for linearized STGCN models.
//!
//! A checkpoint with polynomial activations is lowered to a circuit of
//! rotations, plaintext/ciphertext products, additions and rescales over
//! node-wise packed ciphertexts. Fusion folds plaintext scaling into the
//! linear maps, level accounting picks the ring dimension, and the
//! simulator executes circuits with exact CKKS level and scale rules.

pub mod circuit;
pub mod compile;
pub mod cost;
pub mod error;
pub mod fuse;
pub mod layout;
pub mod levels;
pub mod lower;
pub mod params;
pub mod sim;

pub use circuit::{Builder, Circuit, Node, NodeId, Op, OpCounts, Stage};
pub use compile::{compile, CompileOptions, Compiled};
pub use cost::{estimate_cost, CostModel, CostReport, OpClass};
pub use error::{HeError, Result};
pub use fuse::fuse;
pub use layout::{plan_packing, PackingLayout};
pub use levels::{auto_align, check_sync, closed_form_levels, level_account, CompileProfile, Violation};
pub use lower::{lower_model, LowerOptions};
pub use params::{select_parameters, EncryptionProfile};
pub use sim::{execute, LeveledVector, Noise, RuntimeConfig, Simulator, Trace};
