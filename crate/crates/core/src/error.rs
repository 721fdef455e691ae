use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric input lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A point with zero modulus was handed to an angle computation.
    #[error("degenerate input at dimension {index}: zero resultant vector")]
    Degenerate { index: usize },

    /// Caller broke an operation's shape or arity contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward or backward value became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Well-formed input that refers to something that does not exist.
    #[error("data error: {0}")]
    Data(String),

    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("unsupported query structure: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
