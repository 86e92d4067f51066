use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown character '{0}'")]
    UnknownChar(char),

    #[error("invalid label: {0}")]
    Label(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot render: {0}")]
    Render(String),

    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    ImageFile { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at term {0}")]
    NonFinite(String),

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

/// Coarse failure class, used by the command-line front end to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
    Internal,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::UnknownChar(_)
            | Error::Label(_)
            | Error::Render(_)
            | Error::Dataset { .. }
            | Error::Io { .. }
            | Error::ImageFile { .. }
            | Error::Checkpoint(_) => ErrorKind::Data,
            Error::NonFinite(_) => ErrorKind::Numeric,
            Error::Iteration { source, .. } => source.kind(),
            Error::Shape(_) | Error::Tensor(_) => ErrorKind::Internal,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
