//! Crate-wide error type.
//!
//! Two broad classes matter to callers: configuration errors (bad inputs, violated
//! preconditions — the run could never have started) and runtime errors (I/O and
//! data-format failures encountered mid-flight). [`Error::is_config`] makes the split
//! queryable so front ends can map it to exit codes.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two vectors (or a vector and a model) that must share a length do not.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// An operation that needs at least one element received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A configuration value or combination of values is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    /// A data file failed structural validation.
    #[error("data format error ({field}): {message}")]
    Format { field: String, message: String },

    /// An underlying I/O failure, tagged with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Helper for [`Error::Config`] so call sites stay short.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True when the error reflects bad input rather than a mid-run failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::DimensionMismatch { .. } | Error::EmptyInput(_)
        )
    }
}
