//! Crate-wide error type.
//!
//! Errors are split by contract class so the CLI can map them to exit
//! codes: configuration problems exit 2, everything else exits 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("dimension mismatch in {op}: {details}")]
    Dim { op: &'static str, details: String },

    /// A caller violated an operation's precondition.
    #[error("contract violation in {op}: {details}")]
    Contract { op: &'static str, details: String },

    /// Invalid configuration detected at model build or parse time.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation produced NaN or Inf; aborted at the op boundary.
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },

    /// Scene generation could not satisfy its constraints.
    #[error("scene generation failed: {0}")]
    Generation(String),

    /// Malformed serialized data.
    #[error("format error in {what}: {details}")]
    Format { what: &'static str, details: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dim {
            op,
            details: details.into(),
        }
    }

    pub fn contract(op: &'static str, details: impl Into<String>) -> Self {
        Error::Contract {
            op,
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code class for the CLI: config errors are 2, the rest 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
