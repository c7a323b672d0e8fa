//! Command-line front end: run configuration, experiment pipeline and report I/O.

pub mod commands;
pub mod config;
pub mod pipeline;

use thiserror::Error;

/// Command failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] pnfir::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(pnfir::Error::Parameter(_)) => EXIT_CONFIG,
            Self::Infeasible(_) | Self::Core(pnfir::Error::Infeasible(_)) => EXIT_INFEASIBLE,
            Self::Verification(_) => EXIT_VERIFICATION,
            _ => EXIT_RUNTIME,
        }
    }
}
