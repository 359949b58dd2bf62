use crate::tensor::Shape;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("backward error: {0}")]
    Backward(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("parameter structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shard runtime error: {0}")]
    Shard(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
