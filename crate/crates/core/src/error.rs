use std::path::PathBuf;

use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments, missing files, invalid configuration.
    User,
    /// A model backend could not be reached or refused the request.
    Backend,
    /// Input data is malformed or insufficient.
    Data,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no assessable data: {0}")]
    NoData(String),
    #[error("class vocabularies differ: {0}")]
    VocabularyMismatch(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Invalid(_) | Error::Config(_) => ErrorKind::User,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorKind::User
            }
            Error::Io { .. } => ErrorKind::Data,
            Error::Parse { .. } | Error::NoData(_) | Error::VocabularyMismatch(_) => {
                ErrorKind::Data
            }
            Error::Backend(_) => ErrorKind::Backend,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
