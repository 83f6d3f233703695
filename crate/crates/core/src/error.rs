//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by model evaluation, simulation, optimization and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("node index {index} out of range for a network of {n_nodes} nodes")]
    NodeIndex { index: usize, n_nodes: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid value at `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("steady-state Newton iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    SteadyStateNotConverged { iterations: usize, residual: f64 },

    #[error("time reversal: sample at t = {t} precedes previous sample at t = {last}")]
    TimeReversal { t: f64, last: f64 },

    #[error("integration blew up at t = {t}")]
    BlowUp { t: f64 },

    #[error("control partition does not match the integration grid: {0}")]
    PartitionMismatch(String),

    #[error("constraint index {eta} out of range 1..={max}")]
    ConstraintIndex { eta: usize, max: usize },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dimension(what: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl Error {
    /// True for errors caused by bad input rather than by a failed run.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::Parse(_)
                | Error::Dimension { .. }
                | Error::NodeIndex { .. }
                | Error::ConstraintIndex { .. }
                | Error::PartitionMismatch(_)
        )
    }

    /// Replaces a leading `from` segment of a validation path with `to`.
    pub(crate) fn rebase_path(self, from: &str, to: &str) -> Self {
        match self {
            Error::Validation { path, message } => Error::Validation {
                path: match path.strip_prefix(from) {
                    Some(rest) => format!("{to}{rest}"),
                    None => format!("{to}.{path}"),
                },
                message,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
