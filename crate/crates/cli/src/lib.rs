//! Batch commands around the `pigpvae` library: surrogate synthesis,
//! training, generation, evaluation and table reproduction.
//!
//! Every command is driven by one JSON [`config::RunConfig`], writes its
//! outputs atomically under the configured directory, and records them in a
//! `<command>.manifest.json` with SHA-256 digests. Re-running with the same
//! config and seed reproduces every file byte for byte.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod figures;
pub mod output;

pub use commands::{cmd_evaluate, cmd_generate, cmd_synth, cmd_train};
pub use config::{Case, Overrides, RunConfig};
pub use error::{CliError, Result};
pub use experiment::cmd_experiment;
