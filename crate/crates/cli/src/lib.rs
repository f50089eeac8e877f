//! Command-line plumbing for dataset generation, training, evaluation and
//! pseudo-label analysis.

pub mod commands;
pub mod config;
pub mod rundir;

use std::fmt;

/// Failure classes, mapped to process exit codes by the binary.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(anyhow::Error),
    /// Anything that went wrong while doing the work; exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<sspcm_core::Error> for CliError {
    fn from(e: sspcm_core::Error) -> Self {
        match e {
            sspcm_core::Error::InvalidArgument(_) | sspcm_core::Error::Config(_) => CliError::Usage(e.into()),
            other => CliError::Runtime(other.into()),
        }
    }
}
