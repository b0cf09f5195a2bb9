use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report. The variants double as the
/// error classes the CLI maps onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("ingestion error in {file}: {message}")]
    Ingestion { file: PathBuf, message: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("quantile level error: {0}")]
    Level(String),

    #[error("estimator format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn ingestion(file: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Ingestion {
            file: file.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Ingestion { .. } | Error::Format(_) | Error::Io { .. } => 2,
            Error::Config(_) | Error::Domain(_) | Error::Level(_) => 3,
            Error::InsufficientData(_) | Error::DegenerateData(_) | Error::Fit(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
