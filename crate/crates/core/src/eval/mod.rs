//! Evaluation protocol: per-terrain return, smoothness and energy tables,
//! attention and hidden-activation dumps, and the window-length sweep.

mod metrics;


use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distill::{train_variant, DistillConfig, DistillError, TrajectoryDataset, Variant};
use crate::models::{
    CheckpointError, ModelError, ModelKind, Policy, PolicyCheckpoint, TransformerSpec, WindowBatch,
};
use crate::sim::{reset, RangeSet, SimError, SimState, TerrainKind, TerrainSpec, ACT_DIM, MAX_EPISODE_STEPS};

pub use metrics::{energy, mean_std, smoothness, EpisodeRecord, MetricRow, METRIC_HEADER, STEP_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("{0} checkpoints cannot be used here")]
    WrongKind(ModelKind),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Distill(#[from] DistillError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub kinds: Vec<TerrainKind>,
    pub difficulties: Vec<f64>,
    /// Episodes per (terrain, difficulty) cell.
    pub episodes: usize,
    /// Episodes longer than this are cut off and count as successes.
    pub max_steps: u32,
    pub ranges: RangeSet,
    /// Episodes simulated side by side.
    pub batch: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kinds: TerrainKind::ALL.to_vec(),
            difficulties: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            episodes: 20,
            max_steps: MAX_EPISODE_STEPS,
            ranges: RangeSet::Testing,
            batch: 128,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Config(m.into()));
        if self.kinds.is_empty() || self.difficulties.is_empty() {
            return bad("need at least one terrain kind and difficulty");
        }
        if self.episodes == 0 || self.max_steps == 0 || self.batch == 0 {
            return bad("episodes, max_steps and batch must be positive");
        }
        if self.difficulties.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad("difficulties must lie in [0, 1]");
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(TerrainKind, f64)> {
        self.kinds
            .iter()
            .flat_map(|&k| self.difficulties.iter().map(move |&d| (k, d)))
            .collect()
    }
}

fn episode_seed(seed: u64, cell: usize, episode: usize) -> u64 {
    let mut z = seed ^ ((cell as u64) << 32 | episode as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<MetricRow>,
    pub episodes: Vec<EpisodeRecord>,
}

impl Evaluation {
    /// Mean episode return over every evaluated episode.
    pub fn mean_return(&self) -> f64 {
        mean_std(&self.episodes.iter().map(|e| e.episode_return()).collect::<Vec<_>>()).0
    }

    pub fn success_rate(&self) -> f64 {
        self.episodes.iter().filter(|e| !e.fell).count() as f64 / self.episodes.len().max(1) as f64
    }

    /// Episodes with their index inside their (terrain, difficulty) cell.
    pub fn indexed_episodes(&self) -> Vec<(usize, &EpisodeRecord)> {
        let mut seen: std::collections::HashMap<(TerrainKind, u64), usize> = Default::default();
        self.episodes
            .iter()
            .map(|e| {
                let n = seen.entry((e.terrain, e.difficulty.to_bits())).or_default();
                *n += 1;
                (*n - 1, e)
            })
            .collect()
    }
}

struct Running {
    state: SimState,
    obs: crate::sim::Observation,
    privileged: crate::sim::PrivilegedInfo,
    record: EpisodeRecord,
    done: bool,
}

/// Runs the deterministic policy (mean actions, no dropout) on every cell of
/// the grid. Episodes of the same config and seed are identical across
/// policies.
pub fn evaluate(ckpt: &PolicyCheckpoint, policy_id: &str, cfg: &EvalConfig) -> Result<Evaluation, EvalError> {
    cfg.validate()?;
    let policy = Policy::from_checkpoint(ckpt)?;
    let cells = cfg.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.episodes).map(move |e| (c, e)))
        .collect();
    let mut episodes = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(cfg.batch) {
        let mut envs = chunk
            .iter()
            .map(|&(c, e)| {
                let (kind, d) = cells[c];
                let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, c, e));
                let spec = TerrainSpec::new(kind, d, rand::Rng::gen(&mut rng));
                let (state, obs, privileged) = reset(spec, cfg.ranges, &mut rng)?;
                Ok(Running {
                    state,
                    obs,
                    privileged,
                    record: EpisodeRecord {
                        terrain: kind,
                        difficulty: d,
                        actions: Vec::new(),
                        torques: Vec::new(),
                        joint_velocities: Vec::new(),
                        rewards: Vec::new(),
                        fell: false,
                    },
                    done: false,
                })
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        run_batch(&policy, &mut envs, cfg.max_steps)?;
        episodes.extend(envs.into_iter().map(|r| r.record));
    }
    let rows = cells
        .iter()
        .enumerate()
        .filter_map(|(c, &(kind, d))| {
            let eps: Vec<&EpisodeRecord> = episodes[c * cfg.episodes..(c + 1) * cfg.episodes].iter().collect();
            MetricRow::from_episodes(policy_id, kind, d, &eps)
        })
        .collect();
    Ok(Evaluation { rows, episodes })
}

fn run_batch(policy: &Policy, envs: &mut [Running], max_steps: u32) -> Result<(), EvalError> {
    let mut memories = vec![policy.new_memory(); envs.len()];
    for _ in 0..max_steps {
        let active: Vec<usize> = (0..envs.len()).filter(|&i| !envs[i].done).collect();
        if active.is_empty() {
            break;
        }
        let obs: Vec<_> = active.iter().map(|&i| envs[i].obs).collect();
        let privileged: Vec<_> = active.iter().map(|&i| envs[i].privileged).collect();
        let mut mems: Vec<_> = active.iter().map(|&i| std::mem::take(&mut memories[i])).collect();
        let step = policy.act(&mut mems, &obs, policy.needs_privileged().then_some(&privileged[..]))?;
        for (&i, m) in active.iter().zip(mems) {
            memories[i] = m;
        }
        let mut picked: Vec<(&mut Running, [f32; ACT_DIM])> = envs
            .iter_mut()
            .filter(|r| !r.done)
            .zip(step.actions)
            .collect();
        picked.par_iter_mut().for_each(|(r, a)| advance(r, *a));
    }
    Ok(())
}

fn advance(r: &mut Running, action: [f32; ACT_DIM]) {
    match r.state.step(action) {
        Ok(res) => {
            r.record.actions.push(action);
            r.record.torques.push(res.torques);
            r.record.joint_velocities.push(res.obs.joint_velocities());
            r.record.rewards.push(res.reward);
            r.record.fell = res.fell;
            r.obs = res.obs;
            r.privileged = res.privileged;
            r.done = res.done;
        }
        Err(e) => {
            log::warn!("evaluation episode aborted: {e}");
            r.record.fell = true;
            r.done = true;
        }
    }
}

/// Attention of the newest observation token over the window, one row per
/// control step and one column per window position (oldest first). Each
/// position collects the weight on its observation and action tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    /// Averaged over heads and layers.
    pub mean: Vec<Vec<f64>>,
    /// `[layer][step][position]`, averaged over heads.
    pub per_layer: Vec<Vec<Vec<f64>>>,
}

pub fn dump_attention(
    ckpt: &PolicyCheckpoint,
    spec: TerrainSpec,
    steps: usize,
    ranges: RangeSet,
    seed: u64,
) -> Result<AttentionDump, EvalError> {
    let policy = Policy::from_checkpoint(ckpt)?;
    let tr = policy.transformer().ok_or(EvalError::WrongKind(ckpt.kind))?;
    let ctx = tr.spec.context_length;
    let layers = tr.spec.num_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, mut obs, _) = reset(spec, ranges, &mut rng)?;
    let mut mem = vec![policy.new_memory()];
    let mut dump = AttentionDump {
        mean: Vec::new(),
        per_layer: vec![Vec::new(); layers],
    };
    for _ in 0..steps {
        let act = policy.act(&mut mem, &[obs], None)?;
        // The executed action sits after the newest observation token, so the
        // query of that token ignores it.
        let len = mem[0].len().min(ctx);
        let mut batch = WindowBatch::new(len, tr.spec.obs_dim, tr.spec.act_dim);
        mem[0].push_window(len, &mut batch);
        let mut tape = crate::math::Tape::eval();
        let out = tr.forward(&mut tape, &policy.params, &batch, true)?;
        let trace = out.trace.expect("trace requested");
        let query = 2 * (len - 1);
        let mut mean = vec![0.0; ctx];
        for (l, per) in dump.per_layer.iter_mut().enumerate() {
            let mut row = vec![0.0; ctx];
            for h in 0..trace.heads {
                let w = trace.row(l, 0, h, query);
                for (p, slot) in row.iter_mut().enumerate().take(len) {
                    let a = if 2 * p + 1 < w.len() { w[2 * p + 1] } else { 0.0 };
                    *slot += (w[2 * p] + a) as f64 / trace.heads as f64;
                }
            }
            for (m, r) in mean.iter_mut().zip(&row) {
                *m += r / layers as f64;
            }
            per.push(row);
        }
        dump.mean.push(mean);
        let res = state.step(act.actions[0])?;
        if res.done {
            break;
        }
        obs = res.obs;
    }
    Ok(dump)
}

/// Last-hidden-layer activations along rollouts on each terrain kind. Episodes
/// restart as needed to fill `steps` rows per kind.
pub fn dump_hidden(
    ckpt: &PolicyCheckpoint,
    kinds: &[TerrainKind],
    steps: usize,
    difficulty: f64,
    ranges: RangeSet,
    seed: u64,
) -> Result<Vec<(TerrainKind, Vec<f32>)>, EvalError> {
    let policy = Policy::from_checkpoint(ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut envs = Vec::with_capacity(kinds.len());
    for &k in kinds {
        let spec = TerrainSpec::new(k, difficulty, rand::Rng::gen(&mut rng));
        envs.push(reset(spec, ranges, &mut rng)?);
    }
    let mut memories = vec![policy.new_memory(); kinds.len()];
    let mut per_kind: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(steps); kinds.len()];
    for _ in 0..steps {
        let obs: Vec<_> = envs.iter().map(|e| e.1).collect();
        let privileged: Vec<_> = envs.iter().map(|e| e.2).collect();
        let step = policy.act(&mut memories, &obs, policy.needs_privileged().then_some(&privileged[..]))?;
        for (i, h) in step.hidden.into_iter().enumerate() {
            per_kind[i].push(h);
            let res = envs[i].0.step(step.actions[i])?;
            if res.done {
                let spec = TerrainSpec::new(kinds[i], difficulty, rand::Rng::gen(&mut rng));
                envs[i] = reset(spec, ranges, &mut rng)?;
                memories[i].reset();
            } else {
                envs[i].1 = res.obs;
                envs[i].2 = res.privileged;
            }
        }
    }
    Ok(kinds
        .iter()
        .zip(per_kind)
        .flat_map(|(&k, rows)| rows.into_iter().map(move |r| (k, r)))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub context_length: usize,
    pub mean_return: f64,
    pub heldout_mse: f64,
}

pub const SWEEP_HEADER: [&str; 3] = ["context_length", "mean_return", "heldout_mse"];

impl SweepRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.context_length.to_string(),
            self.mean_return.to_string(),
            self.heldout_mse.to_string(),
        ]
    }
}

/// One student per window length, pretrained on the same data with the same
/// number of updates and batch size, then evaluated identically.
pub fn sequence_length_sweep(
    teacher: &PolicyCheckpoint,
    dataset: &TrajectoryDataset,
    lengths: &[usize],
    spec: &TransformerSpec,
    distill: &DistillConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<SweepRow>, EvalError> {
    lengths
        .iter()
        .map(|&t| {
            let spec = TransformerSpec {
                context_length: t,
                ..spec.clone()
            };
            let cfg = DistillConfig {
                context_length: t,
                ..distill.clone()
            };
            cfg.validate_for(&spec)?;
            let run = train_variant(Variant::NoOc, teacher, dataset, &spec, &cfg, seed)?;
            let ckpt = run.checkpoint;
            let heldout = run.pretrain.and_then(|p| p.train.final_heldout);
            let ev = evaluate(&ckpt, &format!("tert-T{t}"), eval)?;
            Ok(SweepRow {
                context_length: t,
                mean_return: ev.mean_return(),
                heldout_mse: heldout.unwrap_or(f64::NAN),
            })
        })
        .collect()
}
