use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty catalog")]
    EmptyCatalog,
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
    #[error("unknown item {0}")]
    UnknownItem(u32),
    #[error("timestamps of user {user} are not strictly increasing")]
    NonMonotoneTimestamps { user: u32 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("feature id {feature} out of range for field {field} (vocab {vocab})")]
    FeatureOutOfRange {
        field: usize,
        feature: u32,
        vocab: usize,
    },
    #[error("empty click sequence")]
    EmptySequence,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector in cosine similarity")]
    ZeroVector,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("candidate set requires log proposal probabilities")]
    MissingLogq,
    #[error("positive index {index} out of range for {len} candidates")]
    PositiveOutOfRange { index: usize, len: usize },
    #[error("propensity must be in (0, 1], got {0}")]
    InvalidPropensity(f64),
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("queue capacity must be positive")]
    ZeroCapacity,
    #[error("cached queue requires one vector per enqueued positive")]
    MissingCachedVectors,
    #[error("batch of {batch} positives does not fit a queue holding {len}")]
    PositiveNotQueued { batch: usize, len: usize },
    #[error("tape and gradient shapes differ")]
    ShapeMismatch,
    #[error("proposal q is zero where p_data is positive (item {0})")]
    UndefinedPropensity(usize),
    #[error("non-finite loss at step {step} in mode {mode}")]
    NonFiniteLoss { step: u64, mode: &'static str },
    #[error("tabular fit did not converge: total variation {tv} > {tolerance}")]
    NotConverged { tv: f64, tolerance: f64 },
}
