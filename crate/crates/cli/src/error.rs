use std::path::Path;

use odex_core::OdexError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error(transparent)]
    Solver(OdexError),
}

/// Solver argument errors are configuration problems and keep their field name.
impl From<OdexError> for CliError {
    fn from(e: OdexError) -> Self {
        match e {
            OdexError::InvalidArgument { field, reason } => CliError::config(field, reason),
            other => CliError::Solver(other),
        }
    }
}

impl CliError {
    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        CliError::Config { field: field.to_string(), reason: reason.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// Process exit status: 2 for bad input, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Parse { .. } => 2,
            CliError::Io { .. } | CliError::Solver(_) => 1,
        }
    }
}
