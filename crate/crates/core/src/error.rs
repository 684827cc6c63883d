use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("vocabulary target size {target} is below the {required} reserved and alphabet entries")]
    VocabTooSmall { target: usize, required: usize },
    #[error("token id {id} is outside the vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vector is not one-hot")]
    NotOneHot,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("block index {index} out of range 1..={layers}")]
    IndexOutOfRange { index: usize, layers: usize },
    #[error("batch has no masked positions")]
    NoMaskedPositions,
    #[error("step {step} is beyond total_steps {total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("document has no position eligible for masking")]
    NoEligiblePosition,
    #[error("class {label} has {count} members, fewer than k = {k}")]
    ClassTooSmall { label: String, count: usize, k: usize },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("invalid parameter: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
