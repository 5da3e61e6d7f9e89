//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type; variants map onto the failure domains of the pipeline
/// (schedule construction, sampler plans, data handling, model configuration,
/// inference, numerics, and I/O).
#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid noise-schedule parameters or queries.
    #[error("schedule: {0}")]
    Schedule(String),

    /// Timestep index outside 1..=T.
    #[error("timestep index {t} out of range 1..={horizon}")]
    TimestepRange { t: usize, horizon: usize },

    /// Invalid sampler plan (stride, sigma, timestep subset).
    #[error("sampler plan: {0}")]
    Plan(String),

    /// Invalid backbone configuration.
    #[error("config: {0}")]
    Config(String),

    /// Data-domain failure (non-finite fields, bad normalization inputs,
    /// malformed conditions or statistics requests).
    #[error("data: {0}")]
    Data(String),

    /// Parse failure for a sample file, manifest or archive, naming the
    /// offending file.
    #[error("parse {path}: {reason}")]
    Parse { path: String, reason: String },

    /// A loaded sample violated a domain invariant.
    #[error("validate {path}: {reason}")]
    Validation { path: String, reason: String },

    /// Shape mismatch between tensors that must agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Inference-domain failure (model/condition/skip mismatches).
    #[error("inference: {0}")]
    Inference(String),

    /// Non-finite activations or loss, tagged with the stage that produced
    /// them.
    #[error("numerical failure in {stage}: {reason}")]
    Numerical { stage: String, reason: String },

    /// Evaluation-protocol violation (ensemble size, missing references).
    #[error("evaluation: {0}")]
    Evaluation(String),

    /// Training configuration or runtime failure.
    #[error("training: {0}")]
    Training(String),

    /// Checkpoint container errors.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn schedule(msg: impl Into<String>) -> Self {
        CoreError::Schedule(msg.into())
    }

    pub fn plan(msg: impl Into<String>) -> Self {
        CoreError::Plan(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CoreError::Data(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }

    pub fn inference(msg: impl Into<String>) -> Self {
        CoreError::Inference(msg.into())
    }

    pub fn evaluation(msg: impl Into<String>) -> Self {
        CoreError::Evaluation(msg.into())
    }

    pub fn training(msg: impl Into<String>) -> Self {
        CoreError::Training(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        CoreError::Checkpoint(msg.into())
    }

    pub fn numerical(stage: impl Into<String>, reason: impl Into<String>) -> Self {
        CoreError::Numerical {
            stage: stage.into(),
            reason: reason.into(),
        }
    }

    pub fn parse(path: impl Into<String>, reason: impl Into<String>) -> Self {
        CoreError::Parse {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn validation(path: impl Into<String>, reason: impl Into<String>) -> Self {
        CoreError::Validation {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
