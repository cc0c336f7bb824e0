use thiserror::Error;

/// Errors raised across the library.
///
/// The variants split into input problems (bad parameters, unsupported
/// configurations) and numerical failures; [`Error::is_input_error`] tells
/// them apart so front ends can map them to distinct exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("point outside the cone: {inequality} fails (value {value:e})")]
    Feasibility { inequality: String, value: f64 },

    #[error("node {node} at {position:?} is not admissible: {inequality}")]
    InfeasibleNode {
        node: usize,
        position: Vec<f64>,
        inequality: String,
    },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("line search exhausted after {halvings} halvings; blocking node {node} at {position:?}")]
    LineSearch {
        node: usize,
        position: Vec<f64>,
        halvings: usize,
    },

    #[error("Newton iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("scheme error: {0}")]
    Scheme(String),

    #[error("rate unavailable: {0}")]
    RateUnavailable(String),

    #[error("admissible construction failed: {0}")]
    Construction(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// True for errors caused by the caller's input rather than by numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::Parameter(_) | Error::Unsupported(_) | Error::Metric(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
