//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape disagreement. The message names the offending
    /// layer or operand.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A code-bank row is linearly dependent on the rows before it.
    #[error("rank-deficient code bank: row {row} is linearly dependent on earlier rows")]
    RankDeficient { row: usize },

    /// A computation produced NaN or infinity.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// Gradients were requested before a backward pass ran.
    #[error("gradient unavailable: {0}")]
    Gradient(String),

    /// A checkpoint or data file does not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
