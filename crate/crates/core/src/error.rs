//! Error taxonomy shared by the library and the command-line front end.
//!
//! Variants are grouped by how a caller should react: `Shape`, `Config` and
//! `Usage` indicate a caller mistake, `Data` a semantically invalid input,
//! `Format` a malformed or corrupted file, `Parse` an unusable assistant
//! reply, and `Transport` a failed backend exchange.

use thiserror::Error;

/// Process exit code for unexpected internal failures (I/O and similar).
pub const EXIT_INTERNAL: i32 = 1;
/// Process exit code for usage, configuration and shape errors.
pub const EXIT_USAGE: i32 = 2;
/// Process exit code for semantically invalid data.
pub const EXIT_DATA: i32 = 3;
/// Process exit code for malformed files and unparseable replies.
pub const EXIT_FORMAT: i32 = 4;
/// Process exit code for backend transport failures.
pub const EXIT_TRANSPORT: i32 = 5;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor rank or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of its legal range.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was invoked in a state that does not support it.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data is structurally valid but semantically unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A file does not follow its declared on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// An assistant reply could not be parsed into the expected grammar.
    #[error("parse error: {0}")]
    Parse(String),

    /// The chat backend could not be reached or returned a failure.
    #[error("transport error: {0}")]
    Transport(String),

    /// Unexpected I/O failure outside the dedicated readers/writers.
    #[error("io error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wraps an I/O error with the path or action that produced it.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Stable process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Usage(_) => EXIT_USAGE,
            Error::Data(_) => EXIT_DATA,
            Error::Format(_) | Error::Parse(_) => EXIT_FORMAT,
            Error::Transport(_) => EXIT_TRANSPORT,
            Error::Io { .. } => EXIT_INTERNAL,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
