use thiserror::Error;

/// Errors raised by tree construction, validation and the solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{what}: {count} exceeds the enumeration cap {cap}")]
    CapExceeded { what: String, count: f64, cap: usize },
    #[error("node {node}: {reason}")]
    Node { node: usize, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn node(node: usize, reason: impl Into<String>) -> Self {
        Error::Node { node, reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
