use thiserror::Error;

/// Errors raised by the identification, prediction and control pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (even after jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("insufficient data: need more than {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("regression normal matrix is rank deficient")]
    RankDeficient,
    #[error("model order {order} exceeds past horizon {horizon}")]
    OrderExceedsHorizon { order: usize, horizon: usize },
    #[error("task set is empty")]
    EmptyTaskSet,
    #[error("matrix trace is zero")]
    ZeroTrace,
    #[error("quadratic program is infeasible")]
    Infeasible,
    #[error("closed-loop run invalid at step {step}: {reason}")]
    RunInvalid { step: usize, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(what()))
    }
}
