//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KerbsError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Non-finite values or otherwise invalid numeric input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract was violated (e.g. backward from a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// A vector with (near-)zero norm where a direction is required.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    /// Token id outside the vocabulary, or vocabularies do not match.
    #[error("vocab error: {0}")]
    Vocab(String),

    /// Bad or empty input data.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Unrecognized file format (bad magic or version).
    #[error("format error: {0}")]
    Format(String),

    /// File recognized but damaged or truncated.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KerbsError>;
