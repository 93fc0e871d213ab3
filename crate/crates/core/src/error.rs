use std::io;

use thiserror::Error;

/// Errors raised by the library. Each variant maps onto one of three
/// failure classes (configuration, data/format, runtime) so front-ends can
/// pick an exit status without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Parse(_) | Error::Shape(_) => {
                ErrorClass::Config
            }
            Error::Format { .. } | Error::Integrity(_) | Error::Csv(_) | Error::Json(_) => {
                ErrorClass::Data
            }
            Error::NonFinite(_) | Error::Io(_) => ErrorClass::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
