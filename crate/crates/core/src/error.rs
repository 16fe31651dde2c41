use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("layer `{key}`: shape mismatch, expected {expected:?} but found {found:?}")]
    ShapeMismatch {
        key: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("layer `{key}` is not present in the backbone")]
    UnknownLayer { key: String },

    #[error("invalid adapter for layer `{key}`: {reason}")]
    InvalidAdapter { key: String, reason: String },

    #[error("adapter sets are not aggregation-compatible: {0}")]
    Incompatible(String),

    #[error("truncated adapter payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },

    #[error("unsupported adapter format version {found} (expected {expected})")]
    VersionMismatch { expected: u8, found: u8 },

    #[error("malformed adapter payload: {0}")]
    Malformed(String),

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
