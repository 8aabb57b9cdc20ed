use std::io;

use thiserror::Error;

/// Exit code for malformed flags, configs or shape mismatches.
pub const EXIT_USAGE: i32 = 2;
/// Exit code when the requested privacy target cannot be met.
pub const EXIT_INFEASIBLE: i32 = 3;
/// Exit code when training diverged.
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    /// Carries the JSON record explaining why.
    #[error("infeasible: {0}")]
    Infeasible(serde_json::Value),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Core(#[from] fedls::Error),

    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Json(_) => EXIT_USAGE,
            CliError::Core(
                fedls::Error::InvalidParameter(_)
                | fedls::Error::DimensionMismatch { .. }
                | fedls::Error::UnsupportedDimension { .. },
            ) => EXIT_USAGE,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Diverged(_) => EXIT_DIVERGED,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
