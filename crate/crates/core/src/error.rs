//! Crate-wide error type.
//!
//! Errors fall into four classes: configuration errors (bad file or invalid
//! parameter combination), usage errors (an operation called with arguments
//! that violate its contract), domain errors (well-formed input that cannot be
//! processed, e.g. an empty training set), and invariant violations (states
//! the design guarantees can never be reached; reaching one is a hard fault).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration file or parameter combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called in a way that violates its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Well-formed input that cannot be processed.
    #[error("domain error: {0}")]
    Domain(String),

    /// A state the design guarantees unreachable was reached.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}
