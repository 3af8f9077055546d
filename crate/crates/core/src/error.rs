use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification of failures, used for CLI exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad or inconsistent input data (exit code 1).
    Data,
    /// Invalid configuration or parameters (exit code 2).
    Config,
    /// Bug or broken numerical state (exit code 3).
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Data => 1,
            ErrorKind::Config => 2,
            ErrorKind::Internal => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Format { context: String, message: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty coarse annotation on slide {0}")]
    EmptyCoarseAnnotation(String),

    #[error("cannot balance: class {0} empty")]
    EmptyClass(u8),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::Format { .. }
            | Error::InvalidData(_)
            | Error::DimensionMismatch { .. }
            | Error::EmptyCoarseAnnotation(_)
            | Error::EmptyClass(_) => ErrorKind::Data,
            Error::Config(_) => ErrorKind::Config,
            Error::Internal(_) => ErrorKind::Internal,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
