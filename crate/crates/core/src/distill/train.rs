use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::{AdamConfig, AdamState, Gradients, ParamSet, Tape, Tensor, Var};
use crate::models::{
    HistoryBatch, Metadata, ModelKind, Policy, PolicyCheckpoint, PolicySpec, TcnModel, TcnSpec, TransformerModel,
    TransformerSpec, WindowBatch,
};
use crate::parallel::map_shards;
use crate::sim::ACT_DIM;

use super::{DistillConfig, DistillError, Trajectory, TrajectoryDataset};

#[derive(Clone, Debug, PartialEq)]
pub enum StudentArch {
    Transformer(TransformerModel),
    Tcn(TcnModel),
}

/// What the student regresses: the teacher's mean action, or the teacher
/// latent `mu(e_t)` that then feeds the frozen teacher body.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Action,
    Latent,
}

/// A trainable student: architecture, target and its own parameters (never
/// the teacher's).
#[derive(Clone, Debug)]
pub struct Student {
    pub arch: StudentArch,
    pub target: Target,
    pub params: ParamSet<f32>,
}

fn is_teacher_param(name: &str) -> bool {
    name == "log_std" || ["encoder.", "policy.", "value."].iter().any(|p| name.starts_with(p))
}

impl Student {
    pub fn transformer(spec: TransformerSpec, target: Target, rng: &mut impl Rng) -> Result<Self, DistillError> {
        let mut params = ParamSet::new();
        let model = TransformerModel::init(spec, &mut params, rng)?;
        Ok(Self {
            arch: StudentArch::Transformer(model),
            target,
            params,
        })
    }

    pub fn tcn(spec: TcnSpec, target: Target, rng: &mut impl Rng) -> Result<Self, DistillError> {
        let mut params = ParamSet::new();
        let model = TcnModel::init(spec, &mut params, rng)?;
        Ok(Self {
            arch: StudentArch::Tcn(model),
            target,
            params,
        })
    }

    /// Recovers the trainable part of a student checkpoint.
    pub fn from_checkpoint(ckpt: &PolicyCheckpoint) -> Result<Self, DistillError> {
        let mut params = ParamSet::new();
        for (_, name, t) in ckpt.params.iter() {
            if !is_teacher_param(name) {
                params.add(name, t.clone())?;
            }
        }
        let missing = |what: &str| DistillError::Config(format!("{} checkpoint without a {what} spec", ckpt.kind));
        let (arch, target) = match ckpt.kind {
            ModelKind::Transformer | ModelKind::LatentTransformer => {
                let spec = ckpt.spec.transformer.clone().ok_or_else(|| missing("transformer"))?;
                let target = if ckpt.kind == ModelKind::Transformer { Target::Action } else { Target::Latent };
                (StudentArch::Transformer(TransformerModel::bind(spec, &params)?), target)
            }
            ModelKind::TcnActor | ModelKind::TcnStudent => {
                let spec = ckpt.spec.tcn.clone().ok_or_else(|| missing("tcn"))?;
                let target = if ckpt.kind == ModelKind::TcnActor { Target::Action } else { Target::Latent };
                (StudentArch::Tcn(TcnModel::bind(spec, &params)?), target)
            }
            ModelKind::Teacher => return Err(DistillError::Config("a teacher is not a student".into())),
        };
        Ok(Self { arch, target, params })
    }

    pub fn kind(&self) -> ModelKind {
        match (&self.arch, self.target) {
            (StudentArch::Transformer(_), Target::Action) => ModelKind::Transformer,
            (StudentArch::Transformer(_), Target::Latent) => ModelKind::LatentTransformer,
            (StudentArch::Tcn(_), Target::Action) => ModelKind::TcnActor,
            (StudentArch::Tcn(_), Target::Latent) => ModelKind::TcnStudent,
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.arch {
            StudentArch::Transformer(m) => m.spec.output_dim,
            StudentArch::Tcn(m) => m.spec.output_dim,
        }
    }

    /// Deployable checkpoint. Latent students carry the frozen teacher.
    pub fn checkpoint(&self, teacher: &PolicyCheckpoint, metadata: Metadata) -> Result<PolicyCheckpoint, DistillError> {
        let mut spec = PolicySpec::default();
        let mut params = self.params.clone();
        match &self.arch {
            StudentArch::Transformer(m) => spec.transformer = Some(m.spec.clone()),
            StudentArch::Tcn(m) => spec.tcn = Some(m.spec.clone()),
        }
        if self.target == Target::Latent {
            let ts = teacher
                .spec
                .teacher
                .clone()
                .ok_or_else(|| DistillError::Config("latent students need a teacher checkpoint".into()))?;
            for (_, name, t) in teacher.params.iter() {
                if is_teacher_param(name) {
                    params.add(name, t.clone())?;
                }
            }
            spec.teacher = Some(ts);
        }
        let ckpt = PolicyCheckpoint::new(self.kind(), spec, metadata, params);
        Policy::from_checkpoint(&ckpt)?;
        Ok(ckpt)
    }

    /// Longest history the student consumes.
    pub fn context_length(&self) -> usize {
        match &self.arch {
            StudentArch::Transformer(m) => m.spec.context_length,
            StudentArch::Tcn(m) => m.spec.history,
        }
    }

    /// Loss of one group of samples plus the number of supervised rows.
    fn loss(&self, tape: &mut Tape<f32>, data: &[&Trajectory], samples: &[Sample]) -> Result<(Var, usize), DistillError> {
        let out = self.output_dim();
        let target_kind = self.target;
        fn label(kind: Target, tr: &Trajectory, step: usize) -> Result<&[f32], DistillError> {
            match kind {
                Target::Action => Ok(&tr.teacher_actions[step][..]),
                Target::Latent => tr
                    .latents
                    .get(step)
                    .map(|l| &l[..])
                    .ok_or_else(|| DistillError::Dataset("latent targets need trajectories with latents".into())),
            }
        }
        match &self.arch {
            StudentArch::Transformer(m) => {
                let len = samples.iter().map(|s| s.end + 1 - window_start(s.end, m.spec.context_length)).max().unwrap_or(1);
                let mut batch = WindowBatch::new(len, m.spec.obs_dim, m.spec.act_dim);
                let mut target = Vec::with_capacity(samples.len() * len * out);
                for s in samples {
                    let tr = data[s.traj];
                    let start = window_start(s.end, m.spec.context_length);
                    batch.push((start..=s.end).map(|i| (&tr.obs[i][..], &tr.actions[i][..])));
                    for i in start..=s.end {
                        target.extend_from_slice(label(target_kind, tr, i)?);
                    }
                    target.resize(target.len() + (len - (s.end + 1 - start)) * out, 0.0);
                }
                let mask: Vec<f32> = batch.mask();
                let rows = batch.valid.iter().sum();
                let fwd = m.forward(tape, &self.params, &batch, false)?;
                let target = Tensor::new(&[batch.batch * len, out], target)?;
                Ok((tape.mse(fwd.predictions, &target, Some(&mask))?, rows))
            }
            StudentArch::Tcn(m) => {
                let h = m.spec.history;
                let mut batch = HistoryBatch::new(h, m.spec.obs_dim, m.spec.act_dim);
                let mut target = Vec::with_capacity(samples.len() * out);
                const NONE: [f32; ACT_DIM] = [0.0; ACT_DIM];
                for s in samples {
                    let tr = data[s.traj];
                    let pad = h.saturating_sub(s.end + 1);
                    let start = window_start(s.end, h);
                    batch.push((0..pad).map(|_| None).chain((start..=s.end).map(|j| {
                        let prev = if j == 0 { &NONE[..] } else { &tr.actions[j - 1][..] };
                        Some((&tr.obs[j][..], prev))
                    })));
                    target.extend_from_slice(label(target_kind, tr, s.end)?);
                }
                let fwd = m.forward(tape, &self.params, &batch)?;
                let target = Tensor::new(&[samples.len(), out], target)?;
                Ok((tape.mse(fwd.output, &target, None)?, samples.len()))
            }
        }
    }
}

fn window_start(end: usize, context: usize) -> usize {
    (end + 1).saturating_sub(context)
}

/// A window ending at `end` inside trajectory `traj` of the flattened pool list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Sample {
    traj: usize,
    end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub update: usize,
    /// Mean training loss since the previous point.
    pub train_loss: Option<f64>,
    pub heldout_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<LossPoint>,
    pub initial_heldout: Option<f64>,
    pub final_heldout: Option<f64>,
}

/// Mini-batch regression of a student onto teacher labels with Adam,
/// warmup-cosine learning rate and sharded, thread-count independent gradients.
pub struct Trainer {
    pub student: Student,
    pub adam: AdamState,
    pub updates_done: u64,
    seed: u64,
}

impl Trainer {
    pub fn new(student: Student, seed: u64) -> Self {
        let adam = AdamState::new(&student.params, AdamConfig::default());
        Self {
            student,
            adam,
            updates_done: 0,
            seed,
        }
    }

    fn grads(&self, data: &[&Trajectory], samples: &[Sample], shards: usize, train: bool) -> Result<(Gradients<f32>, f64), DistillError> {
        let step = self.updates_done;
        let indexed: Vec<(usize, Sample)> = samples.iter().copied().enumerate().collect();
        let parts = map_shards(&indexed, shards, |chunk| -> Result<(Option<Gradients<f32>>, f64, usize), DistillError> {
            let offset = chunk[0].0 as u64;
            let chunk: Vec<Sample> = chunk.iter().map(|c| c.1).collect();
            let mut tape = if train {
                Tape::train(self.seed ^ offset.wrapping_mul(0x9E37_79B9_7F4A_7C15), step)
            } else {
                Tape::eval()
            };
            let (loss, rows) = self.student.loss(&mut tape, data, &chunk)?;
            let value = tape.value(loss).item() as f64;
            let g = if train { Some(tape.backward(loss, &self.student.params)?) } else { None };
            Ok((g, value, rows))
        });
        let mut parts = parts.into_iter().collect::<Result<Vec<_>, _>>()?;
        let total: usize = parts.iter().map(|p| p.2).sum();
        let mut grads = self.student.params.zero_grads();
        let mut loss = 0.0;
        for (g, value, rows) in parts.iter_mut() {
            let w = *rows as f64 / total as f64;
            loss += *value * w;
            if let Some(g) = g {
                g.scale(w as f32);
                grads.add_assign(g);
            }
        }
        Ok((grads, loss))
    }

    /// Mean loss over the given windows in eval mode.
    fn score(&self, data: &[&Trajectory], samples: &[Sample], shards: usize) -> Result<f64, DistillError> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for chunk in samples.chunks(256) {
            let (_, l) = self.grads(data, chunk, shards, false)?;
            sum += l * chunk.len() as f64;
            n += chunk.len();
        }
        Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
    }

    /// Held-out loss over up to `count` windows drawn with a fixed seed.
    pub fn heldout_loss(&self, heldout: &TrajectoryDataset, count: usize, shards: usize) -> Result<Option<f64>, DistillError> {
        let data: Vec<&Trajectory> = heldout.trajectories.iter().collect();
        let samples = eval_samples(&data, count, self.seed);
        if samples.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.score(&data, &samples, shards)?))
    }

    /// Runs `updates` optimizer steps on windows drawn from `pools`. With
    /// `weights`, each sample first picks a pool with those probabilities;
    /// otherwise every record of every pool is equally likely.
    pub fn train(
        &mut self,
        pools: &[&TrajectoryDataset],
        weights: Option<&[f64]>,
        heldout: &TrajectoryDataset,
        updates: usize,
        cfg: &DistillConfig,
        rng: &mut impl Rng,
    ) -> Result<TrainReport, DistillError> {
        let mut data: Vec<&Trajectory> = Vec::new();
        let mut positions: Vec<Vec<Sample>> = Vec::new();
        for pool in pools {
            let mut pos = Vec::new();
            for tr in &pool.trajectories {
                if !tr.source_consistent() {
                    return Err(DistillError::Dataset("teacher-rollout trajectory whose executed actions differ from the labels".into()));
                }
                pos.extend((0..tr.len()).map(|end| Sample { traj: data.len(), end }));
                data.push(tr);
            }
            positions.push(pos);
        }
        let all: Vec<Sample> = positions.iter().flatten().copied().collect();
        if all.is_empty() {
            return Err(DistillError::Dataset("no training records".into()));
        }
        let weights: Option<Vec<f64>> = weights.map(|w| {
            let w: Vec<f64> = w.iter().zip(&positions).map(|(&w, p)| if p.is_empty() { 0.0 } else { w }).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        });

        let held: Vec<&Trajectory> = heldout.trajectories.iter().collect();
        let held_samples = eval_samples(&held, cfg.eval_windows, self.seed);
        let eval = |t: &Trainer| -> Result<Option<f64>, DistillError> {
            if held_samples.is_empty() {
                Ok(None)
            } else {
                t.score(&held, &held_samples, cfg.grad_shards).map(Some)
            }
        };
        let mut report = TrainReport::default();
        report.initial_heldout = eval(self)?;
        report.curve.push(LossPoint {
            update: 0,
            train_loss: None,
            heldout_loss: report.initial_heldout,
        });
        let mut window_sum = 0.0;
        let mut window_n = 0usize;
        for u in 0..updates {
            let batch: Vec<Sample> = (0..cfg.batch_size)
                .map(|_| match &weights {
                    None => all[rng.gen_range(0..all.len())],
                    Some(w) => {
                        let mut x = rng.gen::<f64>();
                        let mut k = w.len() - 1;
                        for (i, &wi) in w.iter().enumerate() {
                            if x < wi {
                                k = i;
                                break;
                            }
                            x -= wi;
                        }
                        while positions[k].is_empty() {
                            k = (k + 1) % positions.len();
                        }
                        positions[k][rng.gen_range(0..positions[k].len())]
                    }
                })
                .collect();
            let lr = cfg.learning_rate_at(u, updates);
            let (mut grads, loss) = self.grads(&data, &batch, cfg.grad_shards, true)?;
            if !loss.is_finite() || !grads.global_norm().is_finite() {
                return Err(DistillError::NonFinite { update: u, loss, lr });
            }
            grads.clip_global_norm(cfg.max_grad_norm as f32);
            self.adam.step(&mut self.student.params, &grads, lr)?;
            self.updates_done += 1;
            window_sum += loss;
            window_n += 1;
            let last = u + 1 == updates;
            if (u + 1) % cfg.eval_every == 0 || last {
                let h = eval(self)?;
                report.curve.push(LossPoint {
                    update: u + 1,
                    train_loss: Some(window_sum / window_n as f64),
                    heldout_loss: h,
                });
                window_sum = 0.0;
                window_n = 0;
            }
        }
        report.final_heldout = report.curve.last().and_then(|p| p.heldout_loss);
        Ok(report)
    }
}

fn eval_samples(data: &[&Trajectory], count: usize, seed: u64) -> Vec<Sample> {
    let all: Vec<Sample> = data
        .iter()
        .enumerate()
        .flat_map(|(t, tr)| (0..tr.len()).map(move |end| Sample { traj: t, end }))
        .collect();
    if all.len() <= count {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C8E_9CF5_7093_2BD5);
    (0..count).map(|_| all[rng.gen_range(0..all.len())]).collect()
}
