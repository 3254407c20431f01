//! Artifact formats and subcommands behind the `sphere-euler` binary.

pub mod artifacts;
pub mod commands;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or input files; exit code 2.
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    /// Numerical abort or a violated invariant in stored data; exit code 3.
    #[error("{0}")]
    Numerical(String),
    /// Diagnostics ran and at least one check failed; exit code 1.
    #[error("{0}")]
    ChecksFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::ChecksFailed(_) => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

/// Solver errors: bad inputs are configuration errors, everything else is numerical.
impl From<sphere_euler::Error> for CliError {
    fn from(e: sphere_euler::Error) -> Self {
        match e {
            sphere_euler::Error::Invalid(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
