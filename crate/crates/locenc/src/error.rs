//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by dataset handling, model construction, training and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input data (CSV rows, checkpoint lines).
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    /// Invalid configuration value or missing required field.
    #[error("invalid config: {0}")]
    Config(String),

    /// Operation precondition violated (bad shapes, out-of-range ids, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// File not found or other path-level problem.
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by user input (bad config, bad data file)
    /// rather than a failure at run time.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Config(_)
                | Error::Invalid(_)
                | Error::MissingFile(_)
                | Error::Csv(_)
        )
    }
}
