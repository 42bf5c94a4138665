//! Function approximators: privileged encoder, teacher policy, causal
//! Transformer student, TCN estimator, plus the checkpoint container.

mod checkpoint;
mod features;
mod layers;
mod policy;
mod tcn;
mod teacher;
mod transformer;


use thiserror::Error;

use crate::math::MathError;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, Metadata, ModelKind, PolicyCheckpoint, PolicySpec, CHECKPOINT_VERSION,
};
pub use features::{normalize_action, normalize_obs, normalize_privileged, ACTION_INPUT_SCALE};
pub use layers::{Linear, Mlp, MlpOutput};
pub use policy::{Memory, Policy, PolicyStep};
pub use tcn::{HistoryBatch, TcnModel, TcnOutput, TcnSpec};
pub use teacher::{ActionDistribution, PolicyOutput, TeacherModel, TeacherSpec};
pub use transformer::{AttentionTrace, TransformerModel, TransformerOutput, TransformerSpec, WindowBatch};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{0}` has an unexpected shape")]
    BadParam(String),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("empty window")]
    EmptyWindow,
    #[error("window of {len} steps exceeds context length {max}")]
    WindowTooLong { len: usize, max: usize },
    #[error("policy of kind {0} needs privileged information")]
    NeedsPrivileged(&'static str),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// Encoder output `l = mu(e)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(pub Vec<f32>);

impl LatentVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl ModelError {
    pub(crate) fn check(expected: usize, got: usize, what: &'static str) -> Result<(), ModelError> {
        layers::check_dim(what, expected, got)
    }
}
