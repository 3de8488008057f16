use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid shape {0:?}: every dimension must be at least 1 and match the data length")]
    InvalidShape(Vec<usize>),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("variable is not recorded on this tape")]
    NotOnTape,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
