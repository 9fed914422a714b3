use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure in {routine}: {detail}")]
    Numeric { routine: &'static str, detail: String },

    #[error("{routine} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        routine: &'static str,
        iterations: usize,
        residual: f64,
        last: Vec<f64>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path}: line {line}: {detail}")]
    Parse {
        path: PathBuf,
        line: u64,
        detail: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
