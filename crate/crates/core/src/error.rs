use thiserror::Error;

use crate::page_manager::SeqId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("page pool exhausted: requested {requested} pages, {available} available")]
    CapacityExhausted { requested: usize, available: usize },

    #[error("sequence {0} already has a block table")]
    DuplicateSequence(SeqId),

    #[error("unknown sequence {0}")]
    UnknownSequence(SeqId),

    #[error("position {position} out of range (limit {limit})")]
    OutOfRange { position: usize, limit: usize },

    #[error("prefix of {prefix_len} tokens exceeds parent length {parent_len}")]
    InvalidPrefix {
        prefix_len: usize,
        parent_len: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("query {0} has no allowed keys")]
    NoAllowedKeys(usize),

    #[error("index {index} outside flat layout of {len} slots")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("pool census violated: {0}")]
    CensusViolation(String),
}
