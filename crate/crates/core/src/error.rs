use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("linear solver did not converge: relative residual {residual:e} after {iterations} iterations")]
    LinearSolver { residual: f64, iterations: usize },

    #[error("newton did not converge at t = {t}: residual {residual:e} after {iterations} iterations")]
    Newton {
        t: f64,
        residual: f64,
        iterations: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
