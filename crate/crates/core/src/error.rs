use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed input record. `locus` is a line number or feature index.
    #[error("{path}:{locus}: {message}")]
    Parse { path: PathBuf, locus: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("undefined metric: {0}")]
    Metric(String),

    #[error("cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, locus: impl ToString, message: impl Into<String>) -> Self {
        Self::Parse { path: path.into(), locus: locus.to_string(), message: message.into() }
    }

    /// True for failures caused by the caller's arguments or configuration
    /// rather than by input data or I/O.
    pub fn is_argument(&self) -> bool {
        matches!(self, Self::Argument(_))
    }
}
