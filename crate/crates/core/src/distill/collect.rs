use crate::models::{LatentVector, ModelKind, Policy, PolicyCheckpoint, TeacherModel};
use crate::sim::{
    Observation, PrivilegedInfo, RangeSet, SimError, TerrainKind, TerrainSampler, VecEnv, VecStep, ACT_DIM,
};

use super::{DistillError, Source, Trajectory, TrajectoryDataset};

/// Environments split evenly over terrain kinds, so every collection covers
/// each kind no matter how episodes happen to be sampled.
pub struct EnvGroup {
    groups: Vec<VecEnv>,
}

impl EnvGroup {
    /// `num_envs` environments (at least one per kind) with difficulty uniform
    /// on `[0, max_difficulty]`.
    pub fn new(
        kinds: &[TerrainKind],
        num_envs: usize,
        max_difficulty: f64,
        ranges: RangeSet,
        seed: u64,
    ) -> Result<Self, SimError> {
        let k = kinds.len().max(1);
        let groups = kinds
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                let n = (num_envs / k + usize::from(i < num_envs % k)).max(1);
                let sampler = TerrainSampler {
                    kinds: vec![kind],
                    max_difficulty,
                    fixed: None,
                };
                VecEnv::new(n, seed ^ (kind.code() as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407), sampler, ranges)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { groups })
    }

    /// Every terrain kind with training ranges.
    pub fn training(num_envs: usize, max_difficulty: f64, seed: u64) -> Result<Self, SimError> {
        Self::new(&TerrainKind::ALL, num_envs, max_difficulty, RangeSet::Training, seed)
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (g, env) in self.groups.iter().enumerate() {
            if i < env.len() {
                return (g, i);
            }
            i -= env.len();
        }
        panic!("environment index out of range");
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.groups.iter().flat_map(|g| g.observations()).collect()
    }

    pub fn privileged(&self) -> Vec<PrivilegedInfo> {
        self.groups.iter().flat_map(|g| g.privileged()).collect()
    }

    fn start(&self, i: usize, source: Source) -> Trajectory {
        let (g, j) = self.locate(i);
        let slot = &self.groups[g].slots[j];
        Trajectory::new(source, slot.spec.kind, slot.spec.difficulty as f32, slot.state.params)
    }

    pub fn step_each(&mut self, actions: &[[f32; ACT_DIM]]) -> Vec<Result<VecStep, SimError>> {
        assert_eq!(actions.len(), self.len(), "one action per environment");
        let mut out = Vec::with_capacity(actions.len());
        let mut at = 0;
        for g in &mut self.groups {
            let n = g.len();
            out.extend(g.step_each(&actions[at..at + n]));
            at += n;
        }
        out
    }

    pub fn restart(&mut self, i: usize) -> Result<(), SimError> {
        let (g, j) = self.locate(i);
        self.groups[g].restart(j)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutStats {
    pub timesteps: usize,
    pub episodes: usize,
    pub falls: usize,
    /// Episodes dropped because the simulator failed.
    pub skipped: usize,
    /// Mean `||executed - teacher||` over the recorded steps.
    pub mean_gap: f64,
}

fn teacher_model(ckpt: &PolicyCheckpoint) -> Result<Policy, DistillError> {
    if ckpt.kind != ModelKind::Teacher {
        return Err(DistillError::Config(format!("expected a teacher checkpoint, got {}", ckpt.kind)));
    }
    Ok(Policy::from_checkpoint(ckpt)?)
}

/// Teacher mean actions and latents for a batch of states.
fn label(
    t: &TeacherModel,
    teacher: &Policy,
    obs: &[Observation],
    privileged: &[PrivilegedInfo],
) -> Result<(Vec<[f32; ACT_DIM]>, Vec<LatentVector>), DistillError> {
    let o: Vec<&[f32]> = obs.iter().map(|o| o.as_slice()).collect();
    let e: Vec<&[f32]> = privileged.iter().map(|e| e.as_slice()).collect();
    let latents = t.encoder_forward(&teacher.params, &e)?;
    let dist = t.teacher_forward(&teacher.params, &o, &latents)?;
    Ok((dist.mean, latents))
}

/// Runs `driver` (or the teacher when `None`) until exactly `timesteps`
/// records have been gathered, labelling every visited state with the teacher.
fn run(
    envs: &mut EnvGroup,
    teacher: &PolicyCheckpoint,
    driver: Option<&Policy>,
    timesteps: usize,
) -> Result<(TrajectoryDataset, RolloutStats), DistillError> {
    let teacher = teacher_model(teacher)?;
    let t = teacher.teacher().expect("teacher checkpoint binds a teacher");
    if let Some(d) = driver {
        if d.needs_privileged() {
            return Err(DistillError::Config("student rollouts need a student policy".into()));
        }
    }
    let source = if driver.is_some() { Source::StudentRollout } else { Source::TeacherRollout };
    let n = envs.len();
    let mut memories: Vec<_> = match driver {
        Some(d) => (0..n).map(|_| d.new_memory()).collect(),
        None => Vec::new(),
    };
    let mut open: Vec<Trajectory> = (0..n).map(|i| envs.start(i, source)).collect();
    let mut data = TrajectoryDataset::default();
    let mut stats = RolloutStats::default();
    let mut gap_sum = 0.0;
    let mut collected = 0usize;

    while collected < timesteps {
        let active = (timesteps - collected).min(n);
        let obs = envs.observations();
        let privileged = envs.privileged();
        let (labels, latents) = label(t, &teacher, &obs, &privileged)?;
        let executed = match driver {
            Some(d) => d.act(&mut memories, &obs, None)?.actions,
            None => labels.clone(),
        };
        let results = envs.step_each(&executed);
        // Environments past `active` still step but are not recorded; the loop
        // ends after this iteration, so their open trajectories stay contiguous.
        for (i, r) in results.into_iter().enumerate().take(active) {
            match r {
                Ok(vs) => {
                    let tr = &mut open[i];
                    tr.obs.push(obs[i].0);
                    tr.actions.push(executed[i]);
                    tr.teacher_actions.push(labels[i]);
                    tr.latents.push(latents[i].0.clone());
                    tr.rewards.push(vs.result.reward as f32);
                    tr.dones.push(vs.result.done);
                    collected += 1;
                    gap_sum += gap(&executed[i], &labels[i]);
                    if vs.finished.is_some() {
                        stats.episodes += 1;
                        stats.falls += usize::from(vs.result.fell);
                        let done = std::mem::replace(&mut open[i], envs.start(i, source));
                        data.trajectories.push(done);
                        if let Some(m) = memories.get_mut(i) {
                            m.reset();
                        }
                    }
                }
                Err(e) => {
                    log::warn!("environment {i} failed, dropping its episode: {e}");
                    stats.skipped += 1;
                    let lost = &open[i];
                    collected -= lost.len();
                    gap_sum -= lost.actions.iter().zip(&lost.teacher_actions).map(|(a, b)| gap(a, b)).sum::<f64>();
                    envs.restart(i)?;
                    open[i] = envs.start(i, source);
                    if let Some(m) = memories.get_mut(i) {
                        m.reset();
                    }
                }
            }
        }
    }
    data.trajectories.extend(open.into_iter().filter(|t| !t.is_empty()));
    stats.timesteps = collected;
    stats.mean_gap = if collected > 0 { gap_sum / collected as f64 } else { 0.0 };
    Ok((data, stats))
}

fn gap(a: &[f32; ACT_DIM], b: &[f32; ACT_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// Teacher-driven dataset of exactly `timesteps` records; executed actions are
/// the teacher's mean actions.
pub fn collect_teacher_dataset(
    teacher: &PolicyCheckpoint,
    envs: &mut EnvGroup,
    timesteps: usize,
) -> Result<(TrajectoryDataset, RolloutStats), DistillError> {
    run(envs, teacher, None, timesteps)
}

/// Student-driven dataset; every visited state is labelled by the teacher.
pub fn collect_student_dataset(
    student: &Policy,
    teacher: &PolicyCheckpoint,
    envs: &mut EnvGroup,
    timesteps: usize,
) -> Result<(TrajectoryDataset, RolloutStats), DistillError> {
    run(envs, teacher, Some(student), timesteps)
}
