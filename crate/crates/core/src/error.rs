use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on axis '{axis}': {left} vs {right}")]
    AxisMismatch { axis: char, left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed contraction spec '{spec}': {reason}")]
    MalformedSpec { spec: String, reason: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("NaN encountered in {0}")]
    NaN(&'static str),

    #[error("sequence length {total} is not divisible into segments of length {segment_length}")]
    NonDivisibleLength { total: usize, segment_length: usize },

    #[error("invalid segment layout: {0}")]
    InvalidLayout(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    VocabOverflow { token: u32, vocab: usize },

    #[error("test segment of {len} tokens alone exceeds the packing budget of {budget}")]
    TestExceedsBudget { len: usize, budget: usize },

    #[error("cannot split {k} demonstrations into {groups} groups")]
    TooManyGroups { groups: usize, k: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
