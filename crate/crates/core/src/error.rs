//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contraction index '{label}' has conflicting sizes {left} and {right}")]
    ContractIndex { label: char, left: usize, right: usize },

    #[error("bad contraction descriptor '{spec}': {reason}")]
    ContractSpec { spec: String, reason: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward already consumed this tape; re-record the forward pass first")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("audio error: {0}")]
    Audio(String),

    #[error("token {token} out of vocabulary (size {vocab_size}, labels 1..{vocab_size})")]
    OutOfVocab { token: usize, vocab_size: usize },

    #[error("gamma must be in [0, 1], got {0}")]
    GammaRange(f64),

    #[error("unknown parameter tensor '{0}'")]
    UnknownParam(String),

    #[error("missing gradient for parameter '{0}'")]
    MissingGrad(String),

    #[error("checkpoint magic mismatch: expected \"AVMT\", found {0:?}")]
    CheckpointMagic([u8; 4]),

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint contains duplicate tensor name '{0}'")]
    CheckpointDuplicate(String),

    #[error("tensor '{name}' has dtype {found}, expected {expected}")]
    CheckpointDtype { name: String, found: String, expected: String },

    #[error("checkpoint incompatible with config: {0}")]
    CheckpointIncompatible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("unknown noise level token '{0}' (expected clean, 20, 10 or 0)")]
    NoiseToken(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
