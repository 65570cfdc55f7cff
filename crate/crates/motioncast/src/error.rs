//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file header or framing.
    #[error("format error: {0}")]
    Format(String),
    /// Array dimensions disagree with what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),
    /// A token or number is outside its legal range (NaN, infinity, ...).
    #[error("value error: {0}")]
    Value(String),
    /// An operation precondition does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// A caller asked for an output the configuration does not produce.
    #[error("contract violated: {0}")]
    Contract(String),
    /// A quantity left the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// An identifier was not found; the message lists the candidates.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// Configuration keys/values are inconsistent or unknown.
    #[error("config error: {0}")]
    Config(String),
    /// Training produced a non-finite loss or gradient.
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
