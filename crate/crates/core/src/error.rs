use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Arguments violate a documented precondition (shape, range, sign).
    InvalidInput(String),
    /// Inputs are well-formed but the quantity is undefined for them,
    /// e.g. an empty mask or a zero median.
    Degenerate(String),
    /// A forward pass produced a non-finite value.
    NonFinite { node: usize, op: &'static str },
    /// Broken internal invariant of the differentiation graph.
    Internal(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(m) => write!(f, "invalid input: {m}"),
            Error::Degenerate(m) => write!(f, "degenerate input: {m}"),
            Error::NonFinite { node, op } => {
                write!(f, "non-finite value first produced by node #{node} ({op})")
            }
            Error::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl core::error::Error for Error {}
