use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Every failure carries one of a small set of
/// machine-readable kinds (see [`Error::code`]) so the CLI can emit a
/// single parseable line per failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("injection error: {0}")]
    Injection(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable one-word code used in CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Injection(_) => "injection",
            Error::Input(_) => "input",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
