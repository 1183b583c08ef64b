use thiserror::Error;

/// Errors produced by the retention kernels, the world model and its plumbing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("decay must lie in (0, 1], got {0}")]
    InvalidDecay(f64),

    #[error("rotation needs an even head dimension, got {0}")]
    OddHeadDim(usize),

    #[error("{kind} token {token} at {position} is outside the vocabulary of size {size}")]
    Vocabulary {
        kind: &'static str,
        token: u32,
        size: usize,
        position: String,
    },

    #[error("block {block} has {actual} observation tokens, expected {expected}")]
    IncompleteBlock {
        block: usize,
        expected: usize,
        actual: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("index {index} out of range 1..={max}")]
    OutOfRange { index: usize, max: usize },

    #[error("policy returned an invalid action distribution: {0}")]
    InvalidPolicy(String),

    #[error("distribution is not normalized (total mass {0})")]
    NotNormalized(f64),

    #[error("no episode holds a segment of {0} blocks")]
    NoEligibleSegment(usize),

    #[error("invalid episode: {0}")]
    InvalidEpisode(String),

    #[error("unknown episode id {0}")]
    UnknownEpisode(u64),

    #[error("unrecognized file format: {0}")]
    Format(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("configuration rejected: {0}")]
    Config(String),

    #[error("generation modes disagree: {0}")]
    Equivalence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
