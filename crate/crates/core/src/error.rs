use thiserror::Error;

/// Crate-wide error type. Every fallible contract in the library surfaces
/// through one of these variants.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already consumed this graph")]
    DoubleBackward,
    #[error("function is not deterministic: two evaluations of f(x) differ")]
    NonDeterministicF,
    #[error("missing gradient for trainable parameter {name}")]
    MissingGrad { name: String },
    #[error("spatial layer index {i} invalid for M={m}, L={l}")]
    InvalidLayerIndex { i: usize, m: usize, l: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: u32, vocab: usize },
    #[error("attention requires at least one key/value pair")]
    EmptyKeySet,
    #[error("geo token count {count} is not a perfect square")]
    NonSquareTokenGrid { count: usize },
    #[error("depth loss over an empty valid mask")]
    EmptyMask,
    #[error("diffusion step {t} outside [1, {t_max}]")]
    TOutOfRange { t: usize, t_max: usize },
    #[error("no trained checkpoint at {path}")]
    UntrainedModel { path: String },
    #[error("malformed prompt: {reason}")]
    MalformedPrompt { reason: String },
    #[error("frozen parameter group {group} changed during a step")]
    FrozenParamGradApplied { group: String },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint version mismatch: {what}")]
    VersionMismatch { what: String },
    #[error("checkpoint tensor {name}: stored shape {found:?}, expected {expected:?}")]
    ShapeMismatchOnLoad {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("corrupt checkpoint: {reason}")]
    CorruptCheckpoint { reason: String },
    #[error("missing run directory: {dir}")]
    MissingRun { dir: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
