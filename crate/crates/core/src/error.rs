use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// Variants are grouped by the failure class the CLI maps onto exit codes:
/// configuration problems, numerical failures, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {defect:.3e})")]
    NotSymmetric { defect: f64 },

    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:.6e}")]
    NotPsd { eigenvalue: f64 },

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("ill-conditioned matrix in {context}: condition estimate {condition:.3e}")]
    IllConditioned { context: String, condition: f64 },

    #[error("eigen-solver failed to converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("divergence in {context} at step {step}")]
    Divergence { context: String, step: usize },

    #[error("relaxation did not converge in {context} after {steps} steps")]
    Unconverged { context: String, steps: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("value {value} outside the open range of the activation in {context}")]
    Domain { context: String, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("malformed {kind} file {path}: {message}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }

    /// True for failures of the numerics (singular systems, divergence,
    /// non-convergence, domain violations).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotSymmetric { .. }
                | Error::NotPsd { .. }
                | Error::Singular(_)
                | Error::IllConditioned { .. }
                | Error::NoConvergence { .. }
                | Error::NonFinite { .. }
                | Error::Divergence { .. }
                | Error::Unconverged { .. }
                | Error::Domain { .. }
        )
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::InvalidArgument(_)
                | Error::InvalidGraph(_)
                | Error::DimensionMismatch { .. }
                | Error::Json(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Format { .. })
    }
}
