use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library. The CLI maps these onto exit status categories.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error in {}: {message}", path.display())]
    Schema { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint error in {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied configuration or files.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Schema { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
