use std::path::PathBuf;

/// Errors surfaced by the defense pipeline and its harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A shape or hyper-parameter is inconsistent with what an operation expects.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric quantity left the finite range mid-run.
    #[error("numeric abort at {context}: {detail}")]
    NumericAbort { context: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
