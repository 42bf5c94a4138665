use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::physics::{reset, Observation, PrivilegedInfo, SimState, StepResult};
use super::{RangeSet, SimError, TerrainKind, TerrainSpec, ACT_DIM};

/// Chooses the terrain of each new episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TerrainSampler {
    pub kinds: Vec<TerrainKind>,
    /// Difficulty is uniform on `[0, max_difficulty]` unless `fixed` is set.
    pub max_difficulty: f64,
    pub fixed: Option<f64>,
}

impl TerrainSampler {
    pub fn all(max_difficulty: f64) -> Self {
        Self {
            kinds: TerrainKind::ALL.to_vec(),
            max_difficulty,
            fixed: None,
        }
    }

    pub fn flat() -> Self {
        Self {
            kinds: vec![TerrainKind::SmoothSlope],
            max_difficulty: 0.0,
            fixed: Some(0.0),
        }
    }

    pub fn fixed(kind: TerrainKind, difficulty: f64) -> Self {
        Self {
            kinds: vec![kind],
            max_difficulty: difficulty,
            fixed: Some(difficulty),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TerrainSpec {
        let kind = self.kinds[rng.gen_range(0..self.kinds.len())];
        let difficulty = match self.fixed {
            Some(d) => d,
            None => self.max_difficulty.clamp(0.0, 1.0) * rng.gen::<f64>(),
        };
        TerrainSpec::new(kind, difficulty, rng.gen())
    }
}

/// One environment with its own RNG and episode bookkeeping.
#[derive(Clone, Debug)]
pub struct EnvSlot {
    pub state: SimState,
    pub obs: Observation,
    pub privileged: PrivilegedInfo,
    pub spec: TerrainSpec,
    pub episode_return: f64,
    pub episode_len: u32,
    rng: ChaCha8Rng,
}

/// Summary of an episode that ended during a batch step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub spec: TerrainSpec,
    pub episode_return: f64,
    pub length: u32,
    pub fell: bool,
}

#[derive(Clone, Debug)]
pub struct VecStep {
    pub result: StepResult,
    /// Set when the episode ended; the slot has already been reset.
    pub finished: Option<EpisodeSummary>,
}

fn slot_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x5851_F42D
}

impl EnvSlot {
    pub fn new(seed: u64, sampler: &TerrainSampler, ranges: RangeSet) -> Result<Self, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = sampler.sample(&mut rng);
        let (state, obs, privileged) = reset(spec, ranges, &mut rng)?;
        Ok(Self {
            state,
            obs,
            privileged,
            spec,
            episode_return: 0.0,
            episode_len: 0,
            rng,
        })
    }

    pub fn restart(&mut self, sampler: &TerrainSampler, ranges: RangeSet) -> Result<(), SimError> {
        self.spec = sampler.sample(&mut self.rng);
        let (state, obs, privileged) = reset(self.spec, ranges, &mut self.rng)?;
        self.state = state;
        self.obs = obs;
        self.privileged = privileged;
        self.episode_return = 0.0;
        self.episode_len = 0;
        Ok(())
    }

    /// Steps the slot and resets it in place when the episode ends.
    pub fn step(&mut self, action: [f32; ACT_DIM], sampler: &TerrainSampler, ranges: RangeSet) -> Result<VecStep, SimError> {
        let result = self.state.step(action)?;
        self.episode_return += result.reward;
        self.episode_len += 1;
        let mut finished = None;
        if result.done {
            finished = Some(EpisodeSummary {
                spec: self.spec,
                episode_return: self.episode_return,
                length: self.episode_len,
                fell: result.fell,
            });
            self.restart(sampler, ranges)?;
        } else {
            self.obs = result.obs;
            self.privileged = result.privileged;
        }
        Ok(VecStep { result, finished })
    }
}

/// Batch of independent environments. Results do not depend on the worker count.
pub struct VecEnv {
    pub slots: Vec<EnvSlot>,
    pub sampler: TerrainSampler,
    pub ranges: RangeSet,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl VecEnv {
    pub fn new(num_envs: usize, seed: u64, sampler: TerrainSampler, ranges: RangeSet) -> Result<Self, SimError> {
        let slots = (0..num_envs)
            .map(|i| EnvSlot::new(slot_seed(seed, i), &sampler, ranges))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            slots,
            sampler,
            ranges,
            pool: None,
        })
    }

    /// Runs batch steps on a dedicated pool of `workers` threads (1 = serial).
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.pool = if workers > 1 {
            rayon::ThreadPoolBuilder::new().num_threads(workers).build().ok().map(Arc::new)
        } else {
            None
        };
        self
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.slots.iter().map(|s| s.obs).collect()
    }

    pub fn privileged(&self) -> Vec<PrivilegedInfo> {
        self.slots.iter().map(|s| s.privileged).collect()
    }

    pub fn step(&mut self, actions: &[[f32; ACT_DIM]]) -> Result<Vec<VecStep>, (usize, SimError)> {
        self.step_each(actions)
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| (i, e)))
            .collect()
    }

    /// Like [`VecEnv::step`] but reports every slot separately, so callers can
    /// restart a failed slot and keep the others.
    pub fn step_each(&mut self, actions: &[[f32; ACT_DIM]]) -> Vec<Result<VecStep, SimError>> {
        assert_eq!(actions.len(), self.slots.len(), "one action per environment");
        let sampler = &self.sampler;
        let ranges = self.ranges;
        let run = |slots: &mut Vec<EnvSlot>| -> Vec<Result<VecStep, SimError>> {
            slots
                .par_iter_mut()
                .zip(actions.par_iter())
                .map(|(slot, &a)| slot.step(a, sampler, ranges))
                .collect()
        };
        match &self.pool {
            Some(pool) => pool.install(|| run(&mut self.slots)),
            None => self
                .slots
                .iter_mut()
                .zip(actions)
                .map(|(slot, &a)| slot.step(a, sampler, ranges))
                .collect(),
        }
    }

    /// Abandons the current episode of slot `i` and starts a fresh one.
    pub fn restart(&mut self, i: usize) -> Result<(), SimError> {
        self.slots[i].restart(&self.sampler, self.ranges)
    }
}
