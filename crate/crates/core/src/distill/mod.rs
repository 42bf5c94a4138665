//! Teacher-to-student distillation: offline pretraining on teacher rollouts,
//! DAgger-style online correction on the student's own rollouts, and the
//! baseline and ablation students.

mod collect;
mod dataset;
mod train;
mod variants;


use serde::{Deserialize, Serialize};

use crate::math::MathError;
use crate::models::{CheckpointError, ModelError, TcnSpec, TransformerSpec};
use crate::sim::SimError;

pub use collect::{collect_student_dataset, collect_teacher_dataset, EnvGroup, RolloutStats};
pub use dataset::{Source, Trajectory, TrajectoryDataset};
pub use train::{LossPoint, Student, StudentArch, Target, TrainReport, Trainer};
pub use variants::{
    correct_online, pretrain_offline, train_tcn_student, train_variant, CorrectionReport, PretrainReport, RoundReport,
    Variant, VariantRun,
};

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss {loss} at update {update} (learning rate {lr})")]
    NonFinite { update: usize, loss: f64, lr: f64 },
    #[error("environment failed: {0}")]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Math(#[from] MathError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Window length T; must equal the Transformer context length.
    pub context_length: usize,
    pub batch_size: usize,
    pub offline_updates: usize,
    /// Updates after each correction round.
    pub online_updates: usize,
    pub learning_rate: f64,
    pub warmup_updates: usize,
    pub offline_timesteps: usize,
    /// Student timesteps gathered per correction round.
    pub online_timesteps: usize,
    pub correction_rounds: usize,
    /// Student timesteps used to measure the action gap before and after
    /// correction, on identically seeded environments.
    pub gap_timesteps: usize,
    /// Probability that a correction-stage sample comes from data gathered
    /// before the current round. `None` samples the aggregate uniformly.
    pub mix_in: Option<f64>,
    pub heldout_fraction: f64,
    pub eval_every: usize,
    /// Held-out windows scored at each evaluation.
    pub eval_windows: usize,
    /// Environments per rollout, spread evenly over the terrain kinds.
    pub num_envs: usize,
    pub max_difficulty: f64,
    pub grad_shards: usize,
    pub max_grad_norm: f64,
    /// Student used by the TCN baselines.
    pub tcn: TcnSpec,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            context_length: 20,
            batch_size: 64,
            offline_updates: 20_000,
            online_updates: 5_000,
            learning_rate: 1e-4,
            warmup_updates: 200,
            offline_timesteps: 500_000,
            online_timesteps: 100_000,
            correction_rounds: 4,
            gap_timesteps: 20_000,
            mix_in: None,
            heldout_fraction: 0.05,
            eval_every: 500,
            eval_windows: 512,
            num_envs: 50,
            max_difficulty: 1.0,
            grad_shards: 8,
            max_grad_norm: 1.0,
            tcn: TcnSpec::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: &str| Err(DistillError::Config(m.to_string()));
        if self.context_length == 0 || self.batch_size == 0 || self.grad_shards == 0 {
            return bad("context_length, batch_size and grad_shards must be positive");
        }
        if self.offline_timesteps == 0 || self.online_timesteps == 0 || self.gap_timesteps == 0 || self.num_envs == 0 {
            return bad("dataset sizes and num_envs must be positive");
        }
        if self.eval_every == 0 || self.eval_windows == 0 {
            return bad("eval_every and eval_windows must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return bad("heldout_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.max_difficulty) {
            return bad("max_difficulty must lie in [0, 1]");
        }
        if let Some(m) = self.mix_in {
            if !(0.0..=1.0).contains(&m) {
                return bad("mix_in must lie in [0, 1]");
            }
        }
        if self.max_grad_norm <= 0.0 {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }

    /// Also checks that the window length agrees with the Transformer.
    pub fn validate_for(&self, spec: &TransformerSpec) -> Result<(), DistillError> {
        self.validate()?;
        if spec.context_length != self.context_length {
            return Err(DistillError::Config(format!(
                "context_length {} does not match the transformer's {}",
                self.context_length, spec.context_length
            )));
        }
        Ok(())
    }

    /// Warmup then cosine decay to zero over `total` updates.
    pub fn learning_rate_at(&self, update: usize, total: usize) -> f64 {
        let w = self.warmup_updates.min(total);
        if update < w {
            return self.learning_rate * (update + 1) as f64 / w as f64;
        }
        let span = (total - w).max(1) as f64;
        let p = ((update - w) as f64 / span).min(1.0);
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}
