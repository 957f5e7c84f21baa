use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Exit status for a missing input artifact.
pub const EXIT_MISSING_INPUT: i32 = 3;
/// Exit status for any other failure; usage errors exit with 2.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error("missing adapters for classes {classes:?} in {}", dir.display())]
    MissingAdapters { dir: PathBuf, classes: Vec<usize> },

    #[error("bad config {}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] loft_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingInput(_) | CliError::MissingAdapters { .. } => EXIT_MISSING_INPUT,
            CliError::Core(loft_core::Error::MissingAdapters(_)) => EXIT_MISSING_INPUT,
            _ => EXIT_FAILURE,
        }
    }
}
