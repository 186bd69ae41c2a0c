use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = WmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WmError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("insufficient length: need more than {need} tokens, got {got}")]
    InsufficientLength { need: usize, got: usize },

    #[error("not enough tokens in split {split}: need {need}, have {have}")]
    InsufficientTokens { split: String, need: usize, have: usize },

    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("non-finite gradient in parameter {0}; step rejected")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),

    #[error("malformed config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl WmError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        WmError::Shape { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WmError::Io { path: path.into(), source }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            WmError::Shape { .. } => "shape",
            WmError::NonFinite { .. } => "non_finite",
            WmError::NonScalarLoss(_) => "non_scalar_loss",
            WmError::TokenOutOfRange { .. } => "token_out_of_range",
            WmError::SequenceTooLong { .. } => "sequence_too_long",
            WmError::InsufficientLength { .. } => "insufficient_length",
            WmError::InsufficientTokens { .. } => "insufficient_tokens",
            WmError::TooFewSamples { .. } => "too_few_samples",
            WmError::InvalidArgument(_) => "invalid_argument",
            WmError::ArchitectureMismatch(_) => "architecture_mismatch",
            WmError::NonFiniteGradient(_) => "non_finite_gradient",
            WmError::Diverged { .. } => "diverged",
            WmError::MissingCheckpoint(_) => "missing_checkpoint",
            WmError::Config(_) => "malformed_config",
            WmError::Io { .. } => "io",
            WmError::Json(_) => "json",
        }
    }
}
