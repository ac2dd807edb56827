use thiserror::Error;

pub type Result<T, E = OdexError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdexError {
    /// Cholesky factorization failed even at the largest permitted jitter.
    #[error("Gram matrix of size {size} is not positive definite after jitter escalation to {jitter:e}")]
    SingularGram { size: usize, jitter: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("system `{system}` provides no {what} and finite-difference fallback is disabled")]
    MissingDerivativeInfo { system: String, what: &'static str },

    #[error("parameter {name} = {value} is singular for this model")]
    SingularParameter { name: &'static str, value: f64 },

    #[error("fixed point did not converge in window starting at t = {t}: {iterations} iterations, last change {change:e}")]
    NonConvergence { t: f64, iterations: usize, change: f64 },

    #[error("step size {h:e} underflowed at t = {t}")]
    StepUnderflow { t: f64, h: f64 },

    #[error("maximum number of steps ({max_steps}) exceeded at t = {t}")]
    MaxStepsExceeded { t: f64, max_steps: usize },

    #[error("invalid {field}: {reason}")]
    InvalidArgument { field: &'static str, reason: String },
}

impl OdexError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        OdexError::InvalidArgument { field, reason: reason.into() }
    }
}
