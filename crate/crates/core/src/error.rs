use thiserror::Error;

/// Errors raised by inference, training and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed arguments that violate an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// A distribution has no finite mass to normalize.
    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    /// A value violates a data-type invariant (e.g. overlapping spans).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Exhaustive enumeration would exceed the configured bound.
    #[error("enumeration refused: {count} structures exceed the bound of {bound}")]
    TooLarge { count: u128, bound: u128 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
