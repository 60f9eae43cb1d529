//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("SVD of {rows}x{cols} matrix did not converge after {sweeps} sweeps")]
    SvdNoConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },

    #[error("hook (layer {layer}, position {position}) out of range (layers 0..={max_layer}, sequence length {seq_len})")]
    HookOutOfRange {
        layer: usize,
        position: usize,
        max_layer: usize,
        seq_len: usize,
    },

    #[error("invalid model configuration: {0}")]
    ModelConfig(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("relation {relation:?}: {message}")]
    Schema { relation: String, message: String },

    #[error("few-shot prompt needs {needed} other samples, only {available} available")]
    InsufficientShots { needed: usize, available: usize },

    #[error("invalid span: {0}")]
    Span(String),

    #[error("jacobian for prompt {prompt_id}: {message}")]
    Jacobian { prompt_id: String, message: String },

    #[error("degenerate concept direction for {0}")]
    DegenerateConcept(String),

    #[error("unknown object {0:?}")]
    UnknownObject(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("faithfulness needs the object layer to be the final layer {final_layer}, got {object_layer}")]
    NotFinalLayer {
        object_layer: usize,
        final_layer: usize,
    },

    #[error("model memorized {achieved:.3} of its prompts, need at least {required:.2}; try a larger hidden size, more steps or fewer samples")]
    Memorization { achieved: f64, required: f64 },

    #[error("bad magic: not a RELCON container")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated container while reading {0}")]
    Truncated(String),

    #[error("tensor {name:?}: declared {declared} bytes but shape implies {expected}")]
    TensorLength {
        name: String,
        declared: u64,
        expected: u64,
    },

    #[error("container schema error: {0}")]
    ContainerSchema(String),

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
}
