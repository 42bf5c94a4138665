//! Joint PPO training of the privileged encoder, teacher policy and value head.

mod gae;
mod rollout;
mod update;

#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{AdamConfig, AdamState, MathError, ParamSet};
use crate::models::{Metadata, ModelError, ModelKind, PolicyCheckpoint, PolicySpec, TeacherModel, TeacherSpec};
use crate::sim::{RangeSet, SimError, TerrainKind, TerrainSampler, VecEnv};

pub use gae::{compute_gae, normalize_advantages};
pub use rollout::{collect_rollout, training_reward, RolloutBuffer};
pub use update::{ppo_loss, ppo_update, LossTerms, Minibatch, UpdateStats};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("non-finite {what} in environment {env}")]
    NonFinite { env: usize, what: &'static str },
    #[error("environment {env}: {source}")]
    Sim { env: usize, source: SimError },
    #[error("training diverged at iteration {iteration}; last good checkpoint kept")]
    Diverged { iteration: usize, last_good: Box<PolicyCheckpoint> },
    #[error("invalid ppo config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Math(#[from] MathError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    /// Decay the learning rate linearly to zero over the run.
    pub lr_decay: bool,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub horizon: usize,
    pub num_envs: usize,
    pub iterations: usize,
    pub max_grad_norm: f64,
    /// Approximate KL above which the remaining epochs are skipped.
    pub target_kl: f64,
    /// Fraction of the run over which terrain difficulty ramps to its maximum.
    pub curriculum_fraction: f64,
    /// Gradient shards per minibatch; fixed so results do not depend on thread count.
    pub grad_shards: usize,
    /// Clip the shaped per-step training reward at zero (fall penalty excluded).
    pub only_positive_rewards: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 5,
            minibatch_size: 4096,
            learning_rate: 3e-4,
            lr_decay: true,
            entropy_coef: 0.005,
            value_coef: 1.0,
            horizon: 24,
            num_envs: 256,
            iterations: 1500,
            max_grad_norm: 1.0,
            target_kl: 0.5,
            curriculum_fraction: 0.5,
            grad_shards: 8,
            only_positive_rewards: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("gamma and lambda must lie in (0, 1]");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.horizon == 0 || self.num_envs == 0 || self.grad_shards == 0 {
            return bad("epochs, minibatch_size, horizon, num_envs and grad_shards must be positive");
        }
        if !(0.0..=1.0).contains(&self.curriculum_fraction) {
            return bad("curriculum_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if !self.lr_decay || self.iterations == 0 {
            return self.learning_rate;
        }
        let frac = 1.0 - iteration as f64 / self.iterations as f64;
        self.learning_rate * frac.max(0.02)
    }
}

/// Running mean and variance of value targets. The value head predicts
/// targets in these normalized units so its loss stays on the scale of the
/// policy loss whatever the reward magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNorm {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for ValueNorm {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
            count: 0.0,
        }
    }
}

impl ValueNorm {
    /// Merges a batch into the running moments (parallel-variance formula).
    pub fn update(&mut self, batch: &[f32]) {
        if batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        let mean = batch.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = batch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let total = self.count + n;
        let delta = mean - self.mean;
        let m2 = self.var * self.count + var * n + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.var = m2 / total;
        self.count = total;
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt().max(1e-4)
    }

    pub fn normalize(&self, x: f32) -> f32 {
        ((x as f64 - self.mean) / self.std()) as f32
    }

    pub fn denormalize(&self, x: f32) -> f32 {
        (x as f64 * self.std() + self.mean) as f32
    }
}

/// Everything needed for one teacher training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTraining {
    pub ppo: PpoConfig,
    pub spec: TeacherSpec,
    pub terrains: Vec<TerrainKind>,
    /// Difficulty ceiling reached by the curriculum; 0 trains on flat ground.
    pub max_difficulty: f64,
    pub ranges: RangeSet,
    pub seed: u64,
    pub workers: usize,
}

/// One row of the training curve. Returns are rolling means over the last
/// 100 finished episodes (per terrain for `per_terrain`).
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    pub mean_return: Option<f64>,
    pub mean_episode_len: Option<f64>,
    pub per_terrain: BTreeMap<TerrainKind, f64>,
    /// Mean per-step velocity-tracking reward within the iteration's rollout.
    pub mean_tracking: f64,
    pub max_difficulty: f64,
    pub stats: UpdateStats,
}

pub const CURVE_HEADER: &str = "iteration,mean_return,mean_episode_len,return_smooth-slope,return_rough-slope,return_stairs-up,return_stairs-down,return_discrete-obstacles,mean_tracking,max_difficulty,policy_loss,value_loss,approx_kl";

impl CurveRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut cells = vec![self.iteration.to_string(), opt(self.mean_return), opt(self.mean_episode_len)];
        for k in TerrainKind::ALL {
            cells.push(opt(self.per_terrain.get(&k).copied()));
        }
        cells.push(self.mean_tracking.to_string());
        cells.push(self.max_difficulty.to_string());
        cells.push(self.stats.policy_loss.to_string());
        cells.push(self.stats.value_loss.to_string());
        cells.push(self.stats.approx_kl.to_string());
        cells.join(",")
    }
}

pub struct TeacherRun {
    pub checkpoint: PolicyCheckpoint,
    pub curve: Vec<CurveRow>,
}

pub fn teacher_checkpoint(spec: &TeacherSpec, params: &ParamSet<f32>, metadata: Metadata) -> PolicyCheckpoint {
    PolicyCheckpoint::new(
        ModelKind::Teacher,
        PolicySpec {
            teacher: Some(spec.clone()),
            transformer: None,
            tcn: None,
        },
        metadata,
        params.clone(),
    )
}

const WINDOW: usize = 100;

/// PPO over randomized terrains with a linear difficulty curriculum.
/// `on_iter` sees every curve row as it is produced.
pub fn train_teacher(cfg: &TeacherTraining, on_iter: &mut dyn FnMut(&CurveRow)) -> Result<TeacherRun, PpoError> {
    cfg.ppo.validate()?;
    if cfg.terrains.is_empty() {
        return Err(PpoError::Config("empty terrain set".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let model = TeacherModel::init(cfg.spec.clone(), &mut params, &mut init_rng)?;
    let mut adam = AdamState::new(&params, AdamConfig::default());
    let mut vnorm = ValueNorm::default();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6E6F_6973_65);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7368_7566);
    let sampler = TerrainSampler {
        kinds: cfg.terrains.clone(),
        max_difficulty: 0.0,
        fixed: None,
    };
    let mut envs = VecEnv::new(cfg.ppo.num_envs, cfg.seed, sampler, cfg.ranges)
        .map_err(|source| PpoError::Sim { env: 0, source })?
        .with_workers(cfg.workers);
    let mut recent: VecDeque<(f64, u32)> = VecDeque::new();
    let mut recent_kind: BTreeMap<TerrainKind, VecDeque<f64>> = BTreeMap::new();
    let mut curve = Vec::with_capacity(cfg.ppo.iterations);
    let ramp = (cfg.ppo.curriculum_fraction * cfg.ppo.iterations as f64).max(1.0);
    for it in 0..cfg.ppo.iterations {
        let level = (it as f64 / ramp).min(1.0) * cfg.max_difficulty;
        envs.sampler.max_difficulty = level;
        let meta = |stage: &str| Metadata {
            seed: cfg.seed,
            stage: stage.into(),
            iteration: it as u64,
        };
        let buf = collect_rollout(&mut envs, &model, &params, &vnorm, cfg.ppo.horizon, cfg.ppo.grad_shards, cfg.ppo.only_positive_rewards, &mut noise_rng)?;
        let last_good = params.clone();
        let stats = match ppo_update(
            &model,
            &mut params,
            &mut adam,
            &mut vnorm,
            &buf,
            &cfg.ppo,
            cfg.ppo.learning_rate_at(it),
            &mut shuffle_rng,
        ) {
            Ok(s) => s,
            Err(PpoError::Math(MathError::NonFinite { .. })) => {
                return Err(PpoError::Diverged {
                    iteration: it,
                    last_good: Box::new(teacher_checkpoint(&cfg.spec, &last_good, meta("teacher"))),
                })
            }
            Err(e) => return Err(e),
        };
        if params.iter().any(|(_, _, t)| !t.all_finite()) {
            return Err(PpoError::Diverged {
                iteration: it,
                last_good: Box::new(teacher_checkpoint(&cfg.spec, &last_good, meta("teacher"))),
            });
        }
        for f in &buf.finished {
            recent.push_back((f.episode_return, f.length));
            if recent.len() > WINDOW {
                recent.pop_front();
            }
            let q = recent_kind.entry(f.spec.kind).or_default();
            q.push_back(f.episode_return);
            if q.len() > WINDOW {
                q.pop_front();
            }
        }
        let n = recent.len() as f64;
        let row = CurveRow {
            iteration: it,
            mean_return: (n > 0.0).then(|| recent.iter().map(|r| r.0).sum::<f64>() / n),
            mean_episode_len: (n > 0.0).then(|| recent.iter().map(|r| r.1 as f64).sum::<f64>() / n),
            per_terrain: recent_kind
                .iter()
                .map(|(k, q)| (*k, q.iter().sum::<f64>() / q.len() as f64))
                .collect(),
            mean_tracking: buf.tracking.iter().map(|&t| t as f64).sum::<f64>() / buf.len() as f64,
            max_difficulty: level,
            stats,
        };
        on_iter(&row);
        curve.push(row);
    }
    let checkpoint = teacher_checkpoint(
        &cfg.spec,
        &params,
        Metadata {
            seed: cfg.seed,
            stage: "teacher".into(),
            iteration: cfg.ppo.iterations as u64,
        },
    );
    Ok(TeacherRun { checkpoint, curve })
}
