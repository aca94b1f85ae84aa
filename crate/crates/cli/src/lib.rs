//! Experiment runner library: run configuration, the end-to-end pipeline and
//! the loss-histogram export. The `scanmix` binary is a thin wrapper over
//! these pieces; tests drive them directly.

use thiserror::Error;

pub mod config;
pub mod hist;
pub mod pipeline;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, RunManifest};

/// Failures split by exit code: validation problems exit 1, runtime
/// failures exit 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub(crate) fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}
