use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Checkpoint and tensor-payload decoding failures. Each variant has its own
/// stable code so callers can tell them apart.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic: expected \"ADVF\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl CheckpointError {
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic { .. } => "bad_magic",
            CheckpointError::VersionMismatch { .. } => "version_mismatch",
            CheckpointError::Truncated { .. } => "truncated_payload",
            CheckpointError::Malformed(_) => "malformed",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DataError {
    #[error("bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("file length {len} is not a multiple of the {record}-byte record size")]
    RecordLength { len: usize, record: usize },
    #[error("label {label} out of range (classes: {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {class} has {available} images, {required} required")]
    InsufficientClass {
        class: usize,
        available: usize,
        required: usize,
    },
    #[error("class {0} is empty")]
    EmptyClass(usize),
    #[error("pixel value {0} outside [0, 255]")]
    PixelRange(String),
    #[error("empty dataset")]
    Empty,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid mix parameters: {0}")]
    InvalidMix(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
