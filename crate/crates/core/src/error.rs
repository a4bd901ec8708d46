//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor shapes or dimensions do not line up.
    Shape(String),
    /// Invalid configuration (network layout, attack budget, train settings).
    Config(String),
    /// An operation contract was violated (non-scalar backward, bad probability rows).
    Contract(String),
    /// Bad caller-supplied data (out-of-range labels, empty inputs).
    Input(String),
    /// A file did not match its expected format (CIFAR-10 records, checkpoints, CSV).
    Format(String),
    /// A NaN or infinity surfaced where a finite value is required.
    NonFinite(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl Error {
    /// True for errors caused by files or I/O rather than caller mistakes.
    /// The CLI maps these to a distinct exit code.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format(_))
    }
}
