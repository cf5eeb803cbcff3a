//! Crate-wide error type.
//!
//! Errors are grouped by what the caller can do about them: `Config` and
//! `Data` indicate bad input that the user must fix, `Shape` indicates a
//! programming or wiring mistake (incompatible tensor dimensions), and the
//! remaining variants surface I/O and numeric failures at run time.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad hyperparameter, inconsistent sizes).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (dataset files, annotations).
    #[error("data error: {0}")]
    Data(String),

    /// Incompatible tensor shapes. Always names the operation and both shapes.
    #[error("shape error in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// Malformed binary container or checkpoint file.
    #[error("format error: {0}")]
    Format(String),

    /// A kernel produced a non-finite value from finite inputs.
    #[error("non-finite value produced by kernel `{op}`{context}")]
    NonFinite { op: String, context: String },

    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite {
            op: op.into(),
            context: String::new(),
        }
    }

    pub fn non_finite_at(op: impl Into<String>, context: impl Into<String>) -> Self {
        Error::NonFinite {
            op: op.into(),
            context: format!(" ({})", context.into()),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Data(_) | Error::Format(_) | Error::Shape { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
