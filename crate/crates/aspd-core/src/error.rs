//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by geometry kernels, the tensor engine, model code and IO.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An index points outside its valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A caller-facing precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A computation produced or received non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A tensor was used with a tape it does not belong to.
    #[error("tape error: {0}")]
    Tape(String),

    /// Text input could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A binary or structured file is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying IO failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A checkpoint is structurally incompatible with the requested use.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Process exit code for the CLI: 2 config/contract, 3 io/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Index(_)
            | Error::Contract(_)
            | Error::Config(_)
            | Error::Tape(_) => 2,
            Error::Parse { .. } | Error::Format(_) | Error::Io(_) | Error::Checkpoint(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
