//! Error type shared across the crate.

use std::fmt;
use std::io;

/// Errors raised by simulator, solver and runner operations.
#[derive(Debug)]
pub enum Error {
    /// An argument is outside the operation's documented domain.
    InvalidArgument(String),
    /// A physical quantity violates its domain (negative power, time split
    /// outside the slot, ...).
    Domain(String),
    /// The energy-harvesting budget constraint was violated by the caller.
    Constraint(String),
    /// A non-finite value appeared where finite arithmetic is required.
    Numeric(String),
    /// A backhaul message expected by the price exchange is missing.
    Protocol(String),
    /// Configuration file or flag problem.
    Config(String),
    /// Requested instance exceeds a solver's supported size.
    Unsupported(String),
    /// Internal state (e.g. a forward cache) is missing or inconsistent.
    State(String),
    /// Metric files cannot be aggregated together.
    Aggregation(String),
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Constraint(m) => write!(f, "constraint violation: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Protocol(m) => write!(f, "protocol error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Unsupported(m) => write!(f, "unsupported: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Aggregation(m) => write!(f, "aggregation error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
