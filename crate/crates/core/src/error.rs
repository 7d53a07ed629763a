//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by data handling, the model, the backends and the trainer.
#[derive(Debug, Error)]
pub enum TsvError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("token id {token} in record {id} is out of range (vocab_size {vocab_size})")]
    TokenOutOfRange {
        id: String,
        token: u32,
        vocab_size: u32,
    },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("insufficient labeled records: need {needed}, have {available}")]
    InsufficientLabeled { needed: usize, available: usize },

    #[error("degenerate class: no {0} exemplars")]
    DegenerateClass(&'static str),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate embedding: norm {0:e} is too small to normalize")]
    DegenerateEmbedding(f64),

    #[error("embedding is not unit norm (norm {0})")]
    NotUnit(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error("unknown or stale batch token")]
    StaleBatch,

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("backend: {0}")]
    Backend(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("single-class: evaluation needs both truthful and hallucinated examples")]
    SingleClass,

    #[error("missing hidden labels: {0}")]
    MissingLabels(String),

    #[error("id leakage: test record {0} was used in training")]
    Leakage(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, TsvError>;
