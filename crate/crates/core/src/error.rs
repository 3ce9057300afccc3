use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty score vector")]
    EmptyScores,
    #[error("non-finite score")]
    NonFinite,
    #[error("zero vector")]
    ZeroVector,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate distribution")]
    DegenerateDistribution,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid input layout: {0}")]
    InvalidLayout(String),
    #[error("sequence overflow: {len} tokens exceeds max_seq_len {max}")]
    SequenceOverflow { len: usize, max: usize },
    #[error("no video span")]
    NoVideoSpan,
    #[error("token id {token} out of range for vocab size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("span [{start}, {end}) out of bounds for row of length {len}")]
    SpanOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("invalid decode params: {0}")]
    InvalidParams(String),
    #[error("contrast annihilated distribution")]
    ContrastAnnihilated,

    #[error("no pairs")]
    NoPairs,
    #[error("no originally-correct samples")]
    NoOriginallyCorrect,
    #[error("no interplay records")]
    NoRecords,

    #[error("sample {sample_id}: {message}")]
    Schema { sample_id: String, message: String },
    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("unknown video id {0}")]
    UnknownVideo(String),
    #[error("feature store needs at least 2 videos, has {0}")]
    StoreTooSmall(usize),
    #[error("prediction ids do not match dataset: {0}")]
    IdMismatch(String),
    #[error("{what} digest mismatch: file has {recorded}, inputs give {computed}")]
    DigestMismatch {
        what: String,
        recorded: String,
        computed: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidParams(_) => 1,
            Error::Invariant(_) | Error::ContrastAnnihilated => 3,
            _ => 2,
        }
    }
}
