//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("capacity exceeded: need {needed} positions, max_seq is {max_seq}")]
    Capacity { needed: usize, max_seq: usize },

    #[error("tensor `{name}`: {reason}")]
    Load { name: String, reason: String },

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("contrast pair mismatch: {0}")]
    Contrast(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config hash mismatch in {dir}: manifest has {found}, current config is {expected}")]
    HashMismatch {
        dir: PathBuf,
        expected: String,
        found: String,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied configuration rather than
    /// a runtime failure. The CLI maps these to exit code 2.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Argument(_) | Error::HashMismatch { .. } | Error::Json(_)
        )
    }
}
