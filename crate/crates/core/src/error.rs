use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("solver failure at coordinate {coordinate}: {reason}")]
    Coordinate { coordinate: usize, reason: String },

    #[error("solver did not converge after {iterations} iterations")]
    NotConverged {
        iterations: usize,
        /// Objective value after every iteration.
        trace: Vec<f64>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
