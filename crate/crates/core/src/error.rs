use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("backward called before any forward pass was recorded")]
    NoForwardPass,

    #[error("non-finite value in {context} at index {index}: {value}")]
    NonFinite {
        context: &'static str,
        index: usize,
        value: f64,
    },

    #[error("action {action:?} lies outside the action box [{lo}, {hi}]^2")]
    OutOfBox { action: Vec<f64>, lo: f64, hi: f64 },

    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("distribution family mismatch: {left} vs {right}")]
    FamilyMismatch { left: String, right: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("did not converge after {iterations} iterations (loss {loss}, gradient norm {grad_norm:e})")]
    NotConverged {
        iterations: usize,
        loss: f64,
        grad_norm: f64,
        theta: Vec<f64>,
    },

    #[error("policy too concentrated: {draws} draws gave no pair with distinct gold rewards")]
    Concentrated { draws: usize },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Checks every entry is finite, reporting the first offender.
pub(crate) fn ensure_finite(context: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context,
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}
