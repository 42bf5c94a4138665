use rand::seq::SliceRandom;
use rand::Rng;

use crate::sim::{EnvParams, TerrainKind, ACT_DIM, OBS_DIM};

/// Who chose the executed actions of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    TeacherRollout,
    StudentRollout,
}

/// One episode (or the collected part of one). Every step carries the teacher's
/// mean action as the label.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub source: Source,
    pub terrain: TerrainKind,
    pub difficulty: f32,
    pub params: EnvParams,
    pub obs: Vec<[f32; OBS_DIM]>,
    pub actions: Vec<[f32; ACT_DIM]>,
    pub teacher_actions: Vec<[f32; ACT_DIM]>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    /// Teacher latents `mu(e_t)`; present when collected in-process, empty when
    /// read back from a trajectory file.
    pub latents: Vec<Vec<f32>>,
}

impl Trajectory {
    pub fn new(source: Source, terrain: TerrainKind, difficulty: f32, params: EnvParams) -> Self {
        Self {
            source,
            terrain,
            difficulty,
            params,
            obs: Vec::new(),
            actions: Vec::new(),
            teacher_actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            latents: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn has_latents(&self) -> bool {
        self.latents.len() == self.len()
    }

    /// The executed action equals the teacher label everywhere exactly when
    /// the teacher was driving.
    pub fn source_consistent(&self) -> bool {
        let same = self.actions == self.teacher_actions;
        match self.source {
            Source::TeacherRollout => same,
            Source::StudentRollout => true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn timesteps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn terrain_kinds(&self) -> Vec<TerrainKind> {
        let mut k: Vec<TerrainKind> = self.trajectories.iter().map(|t| t.terrain).collect();
        k.sort();
        k.dedup();
        k
    }

    pub fn extend(&mut self, other: TrajectoryDataset) {
        self.trajectories.extend(other.trajectories);
    }

    /// Splits off roughly `fraction` of the trajectories (at least one when
    /// there are two or more) as a held-out set. Returns `(train, held_out)`.
    pub fn split(&self, fraction: f64, rng: &mut impl Rng) -> (TrajectoryDataset, TrajectoryDataset) {
        let mut idx: Vec<usize> = (0..self.trajectories.len()).collect();
        idx.shuffle(rng);
        let n = self.trajectories.len();
        let held = if n >= 2 { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) } else { 0 };
        let mut held_idx = idx[..held].to_vec();
        let mut train_idx = idx[held..].to_vec();
        held_idx.sort_unstable();
        train_idx.sort_unstable();
        let pick = |ids: &[usize]| TrajectoryDataset {
            trajectories: ids.iter().map(|&i| self.trajectories[i].clone()).collect(),
        };
        (pick(&train_idx), pick(&held_idx))
    }

    /// Keeps a random `fraction` of the trajectories (all of them at 1).
    pub fn subsample(&self, fraction: f64, rng: &mut impl Rng) -> TrajectoryDataset {
        if fraction >= 1.0 {
            return self.clone();
        }
        TrajectoryDataset {
            trajectories: self
                .trajectories
                .iter()
                .filter(|_| rng.gen::<f64>() < fraction)
                .cloned()
                .collect(),
        }
    }

    /// Position of every record as `(trajectory, step)`.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |s| (i, s)))
            .collect()
    }
}
