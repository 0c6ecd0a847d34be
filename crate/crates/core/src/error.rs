use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {kernel}: {msg}")]
    Dimension { kernel: &'static str, msg: String },

    #[error("non-finite value produced by {kernel}")]
    NonFinite { kernel: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("i/o error on {path}: {source}")]
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
    pub(crate) fn dim(kernel: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            kernel,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    /// True for failures caused by non-finite arithmetic, which training treats
    /// as a skippable step rather than a fatal error.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numeric(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
