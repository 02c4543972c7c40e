//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// An operation produced or received a NaN/Inf where a finite value is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Bad argument outside of shape problems (labels out of range, empty batch, ...).
    #[error("invalid argument to {op}: {details}")]
    InvalidArgument { op: &'static str, details: String },

    /// A configuration failed validation before any work started.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A dataset or checkpoint file is malformed.
    #[error("malformed file {path}{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    DataFormat {
        path: String,
        line: Option<usize>,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub fn arg(op: &'static str, details: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            details: details.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code contract: 2 for usage/validation errors, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
