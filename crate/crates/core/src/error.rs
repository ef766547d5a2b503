use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the alignment library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {message}")]
    Header { path: PathBuf, message: String },

    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSizeMismatch { expected: usize, found: usize },

    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("mask intersection is empty")]
    EmptyIntersection,

    #[error("no valid displacements")]
    NoValidDisplacements,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("internal consistency check failed: {0}")]
    Inconsistent(String),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
