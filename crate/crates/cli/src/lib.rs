//! Command implementations behind the `cgpo` binary.

pub mod commands;
pub mod config;
pub mod report;

use thiserror::Error;

pub use config::RunConfig;

/// Exit status 1 for problems the operator can fix, 2 for everything else.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<cgpo_core::DataError> for CliError {
    fn from(e: cgpo_core::DataError) -> Self {
        CliError::User(e.to_string())
    }
}

pub(crate) fn io_err(context: &str, path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Internal(format!("{context} {}: {e}", path.display()))
}
