use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate. Each variant names the subsystem that
/// produced it so command-line callers can report a tagged message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("contract violation in {context}: {detail}")]
    Contract { context: String, detail: String },

    #[error("ingestion error in {path}:{line}: {detail}")]
    Ingest {
        path: PathBuf,
        line: u64,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Contract {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short subsystem tag used by the CLI when printing failures.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Numeric { .. } => "numeric",
            Error::Contract { .. } => "contract",
            Error::Ingest { .. } => "ingest",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}
