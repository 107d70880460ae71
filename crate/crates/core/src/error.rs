use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("graph is disconnected ({reached} of {n} nodes reachable from node 0)")]
    Disconnected { n: usize, reached: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dimension mismatch for `{name}`: expected {expected}, got {got}")]
    DimensionMismatch {
        name: String,
        expected: usize,
        got: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("security constraint violated on edge ({k}, {j}): angle difference {difference} rad")]
    SecurityViolation { k: usize, j: usize, difference: f64 },

    #[error("eigenvalue {index} is {value:e}; a connected graph is required")]
    ZeroEigenvalueBeyondFirst { index: usize, value: f64 },

    #[error("observable mode with real part {real_part:e} is not asymptotically stable")]
    InstabilityDetected { real_part: f64 },

    #[error("controller gains are not uniform (`{name}`)")]
    HeterogeneousGains { name: String },

    #[error("non-finite state at t = {t} s (last finite state at t = {last_finite_t} s)")]
    NonFiniteState { t: f64, last_finite_t: f64 },

    #[error("trajectory did not settle within {horizon} s (error {error:e})")]
    NotSettled { horizon: f64, error: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}

pub(crate) fn check_len(name: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            name: name.to_string(),
            expected,
            got,
        })
    }
}
