//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Validation(String),

    /// A client produced a non-finite loss during local training.
    #[error("client {client_id} diverged: non-finite loss at round {round}, local step {step}")]
    Divergence {
        client_id: usize,
        round: usize,
        step: usize,
    },

    /// A partition satisfying the size constraints could not be drawn.
    #[error("partitioning infeasible: {0}")]
    Infeasible(String),

    /// A binary file does not start with the expected magic number.
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    /// A binary file is shorter (or longer) than its header promises.
    #[error("{path}: truncated or malformed: {detail}")]
    Truncated { path: PathBuf, detail: String },

    /// Paired files disagree on how many records they hold.
    #[error("record count mismatch: {0}")]
    CountMismatch(String),

    /// A checkpoint was written by an unsupported format version.
    #[error("{path}: unsupported checkpoint version {found}")]
    UnsupportedVersion { path: PathBuf, found: u32 },

    /// A checkpoint was saved for a different model shape.
    #[error("{path}: checkpoint spec hash {found:#018x} does not match expected {expected:#018x}")]
    SpecHashMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    /// A text file failed to parse.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// An experiment config failed validation; `field` is the JSON path.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// An I/O failure, annotated with what was being attempted.
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
