//! Error type shared across the crate.
//!
//! Every fallible operation returns [`Error`]. The CLI maps each variant to a
//! process exit code: configuration, parsing, domain and I/O problems exit
//! with code 2, numeric failures (non-finite loss or gradient, overflowing
//! norms) exit with code 3. Success is exit code 0.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: unknown key, out-of-range value, inconsistent
    /// combination of settings.
    #[error("config error: {0}")]
    Config(String),

    /// A file could not be parsed. Carries the path and 1-based line number.
    #[error("parse error: {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// An argument violated a mathematical precondition (zero-norm vector,
    /// shape mismatch, empty batch, out-of-vocabulary id, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced a non-finite value. Training aborts on this.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
