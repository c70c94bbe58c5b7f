//! Error type shared across the toolkit.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, the encoder, losses, banks, attacks and the harness.
#[derive(Debug)]
pub enum Error {
    /// Two shapes that must agree do not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A shape or geometry argument is invalid for the operation.
    Dimension { op: &'static str, detail: String },
    /// Invalid configuration value.
    Config(String),
    /// A caller violated an operation's contract.
    Contract(String),
    /// Input is numerically degenerate (e.g. near-zero vector passed to l2_normalize).
    DegenerateInput(String),
    /// A NaN or Inf surfaced where the contract forbids it.
    NonFinite { context: String },
    /// File-format violation in `.ten`, checkpoint or dataset files.
    Format(String),
    /// Underlying I/O failure.
    Io { path: String, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::Dimension { op, detail } => write!(f, "{op}: {detail}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Format(msg) => write!(f, "file format error: {msg}"),
            Error::Io { path, source } => write!(f, "i/o error on {path}: {source}"),
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
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
