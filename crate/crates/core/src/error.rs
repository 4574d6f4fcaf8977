use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violates its domain (non-positive curvature, negative
    /// incentive, and so on).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An input collection is empty, out of range, or otherwise unusable.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The incentive formula has a vanishing denominator for these estimates.
    #[error("singular configuration: {0}")]
    SingularConfiguration(String),

    /// An exact computation was requested above its size guard.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// A history file row failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    /// A record refers to a customer that is not part of the scenario.
    #[error("unknown customer reference: {0}")]
    Referential(String),

    /// Event indices are not strictly increasing.
    #[error("event ordering violation: {0}")]
    Ordering(String),

    /// A scenario configuration admits no valid draw.
    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
