//! Runtime error type shared across the crate.
//!
//! Programmer contract violations (shape mismatches, non-scalar losses)
//! panic with a descriptive message; this type covers conditions a correct
//! caller can still hit at runtime: bad configs, bad data files, I/O
//! failures and numeric divergence during training.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// Invalid or inconsistent configuration (unknown keys, vocab mismatch).
    Config(String),
    /// Dataset or token-stream contents violate a contract.
    Data(String),
    /// A file could not be read/written.
    Io { path: PathBuf, source: std::io::Error },
    /// An on-disk format failed to parse (bad magic, truncation, bad header).
    Format(String),
    /// Numeric divergence: NaN/Inf loss or gradients during training.
    Numeric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 1 for config/data/format/io problems,
    /// 2 for numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
