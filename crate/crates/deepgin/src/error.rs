//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem-level failure (missing file, unwritable path, ...).
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// File exists but its content cannot be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Inconsistent or unsupported configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Mask generation could not satisfy its constraints in the retry budget.
    #[error("mask generation failed: {0}")]
    Generation(String),

    /// A feature was requested that needs resources not available here
    /// (e.g. pretrained extractor weights).
    #[error("capability unavailable: {0}")]
    Capability(String),

    /// A loss or activation became non-finite; training must abort.
    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    /// Checkpoint does not match the active configuration.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
