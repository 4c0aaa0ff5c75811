use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in round {round}: {what}")]
    Numeric { round: u64, what: String },

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("config error: {0}")]
    Config(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures on the simulated wire.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("checksum mismatch in update from node {node} at round {round}")]
    Checksum { node: u32, round: u64 },

    #[error("truncated message: needed {needed} bytes, had {available}")]
    Truncated { needed: usize, available: usize },

    #[error("protocol version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("update from node {node} has an empty delta")]
    EmptyDelta { node: u32 },

    #[error("{extra} trailing bytes after message")]
    TrailingBytes { extra: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,

    #[error("incompatible checkpoint schema version {found} (supported: {supported})")]
    Incompatible { found: u32, supported: u32 },

    #[error("checkpoint truncated")]
    Truncated,

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("checkpoint shape header does not match payload: {0}")]
    Shape(String),
}
