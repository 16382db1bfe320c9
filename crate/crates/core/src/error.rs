//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("layer index {layer} outside 1..={n_layers}")]
    LayerIndex { layer: usize, n_layers: usize },

    #[error("sequence of {len} positions exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("no robustness gap: acc_ori = {acc_ori}, acc_pert = {acc_pert}")]
    NoRobustnessGap { acc_ori: f64, acc_pert: f64 },

    #[error("checker failed: {0}")]
    Checker(String),

    #[error("edit diverged at step {step} (loss = {loss}); lower the learning rate")]
    Divergence { step: usize, loss: f64 },

    #[error("no applicable site for {kind} perturbation")]
    NoApplicableSite { kind: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, emitted by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "DIMENSION_ERROR",
            Error::LayerIndex { .. } => "LAYER_INDEX_ERROR",
            Error::SequenceTooLong { .. } => "SEQUENCE_TOO_LONG",
            Error::NoRobustnessGap { .. } => "NO_ROBUSTNESS_GAP",
            Error::Checker(_) => "CHECKER_ERROR",
            Error::Divergence { .. } => "DIVERGENCE_ERROR",
            Error::NoApplicableSite { .. } => "NO_APPLICABLE_SITE",
            Error::Parameter(_) => "PARAMETER_ERROR",
            Error::Protocol(_) => "PROTOCOL_ERROR",
            Error::InvalidModel(_) => "INVALID_MODEL",
            Error::Format(_) => "FORMAT_ERROR",
            Error::Io(_) => "IO_ERROR",
            Error::Json(_) => "JSON_ERROR",
        }
    }
}
