use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied a value that violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Configuration key or value could not be understood.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset contents do not satisfy what the run needs.
    #[error("data error: {0}")]
    Data(String),

    /// A file on disk does not follow the expected layout.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Operation requires state that has not been prepared yet.
    #[error("state error: {0}")]
    State(String),

    /// An internal invariant was breached.
    #[error("internal error: {0}")]
    Internal(String),

    /// Training diverged or otherwise failed.
    #[error("training failure: {0}")]
    Training(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
