use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{what} is undefined at {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("{0} is not available for this model family")]
    Unsupported(String),

    #[error("requested mass {requested} exceeds the attainable mass {critical}")]
    Condensation { requested: f64, critical: f64 },

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("transport solver stopped after {iterations} iterations (action {action}, relative change {change})")]
    NotConverged {
        iterations: usize,
        action: f64,
        change: f64,
    },
}

impl Error {
    /// True for failures that happen while computing, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Quadrature(_) | Error::Numerical(_) | Error::NotConverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
