//! Library surface of the pipeline orchestrator (the `dynamite` binary is
//! a thin wrapper; the acceptance suite drives stages through this crate).

pub mod config;
pub mod manifest;
pub mod stages;

use thiserror::Error;

/// Stage errors carry the process exit code contract:
/// 2 config, 3 artifact, 4 invariant, 1 anything else.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("{0}")]
    Core(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Core(_) => 1,
        }
    }
}
