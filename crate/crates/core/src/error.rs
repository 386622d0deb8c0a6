use thiserror::Error;

/// Errors raised by the preference-game library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("anti-symmetry violated at ({row}, {col}): {forward} + {backward} != 1")]
    AntiSymmetry {
        row: usize,
        col: usize,
        forward: f64,
        backward: f64,
    },
    #[error("entry ({row}, {col}) = {value} is not a probability")]
    NotAProbability { row: usize, col: usize, value: f64 },
    #[error("diagonal entry ({0}, {0}) = {1} must be 1/2")]
    Diagonal(usize, f64),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("policy must lie in the simplex interior (entry {index} = {value})")]
    NotInterior { index: usize, value: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
    #[error("mixture is unnormalisable: both policies put zero mass on every action")]
    Unnormalisable,
    #[error("infinite KL divergence: action {0} has positive mass but zero reference mass")]
    InfiniteKl(usize),
    #[error("reference policy assigns zero probability to action {0}")]
    ZeroReference(usize),
    #[error("no convergence after {iterations} iterations: {reason}")]
    NoConvergence { iterations: usize, reason: String },
    #[error("preference data is separable; maximum-likelihood rewards diverge")]
    Separable,
}

pub type Result<T> = std::result::Result<T, Error>;
