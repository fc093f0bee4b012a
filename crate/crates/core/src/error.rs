use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parameter layout mismatch")]
    LayoutMismatch,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration rejected; `key` is the dotted path of the offending entry.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("data error in {}: {message}", path.display())]
    Data { path: PathBuf, message: String },

    #[error("csv error in {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for a failed experiment: 1 for configuration
    /// problems, 2 for data problems, 3 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 1,
            Error::Data { .. } | Error::Csv { .. } => 2,
            _ => 3,
        }
    }
}
