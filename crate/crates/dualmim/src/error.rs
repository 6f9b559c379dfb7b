//! Error type shared by the data, training, and evaluation layers. The
//! numeric substrate keeps its own [`NnError`], converted on the way up.

use std::fmt;
use std::path::Path;

use crate::nn::NnError;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// OS-level I/O failure, with path context baked into the message.
    Io(String),
    /// Binary container violation at a byte offset.
    Format { offset: usize, msg: String },
    /// Invalid configuration or arguments.
    Config(String),
    /// NaN or infinity where a finite value is required.
    NonFinite(String),
    /// Bubbled up from the tensor/graph layer.
    Nn(NnError),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Format { offset, msg } => write!(f, "format error at byte {offset}: {msg}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Nn(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<NnError> for Error {
    fn from(e: NnError) -> Self {
        Error::Nn(e)
    }
}

/// Wraps an I/O error with the path it concerned.
pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}
