use crate::sim::{TerrainKind, ACT_DIM};

/// Mean Euclidean norm of successive action differences; `None` for fewer
/// than two actions.
pub fn smoothness(actions: &[[f32; ACT_DIM]]) -> Option<f64> {
    if actions.len() < 2 {
        return None;
    }
    let total: f64 = actions
        .windows(2)
        .map(|w| {
            w[1].iter()
                .zip(&w[0])
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Some(total / (actions.len() - 1) as f64)
}

/// Mean mechanical power magnitude `sum_i |tau_i * qd_i|` per control step, W.
pub fn energy(torques: &[[f64; ACT_DIM]], joint_velocities: &[[f32; ACT_DIM]]) -> Option<f64> {
    if torques.is_empty() || torques.len() != joint_velocities.len() {
        return None;
    }
    let total: f64 = torques
        .iter()
        .zip(joint_velocities)
        .map(|(t, q)| t.iter().zip(q).map(|(t, q)| (t * *q as f64).abs()).sum::<f64>())
        .sum();
    Some(total / torques.len() as f64)
}

/// One evaluated episode with what the metrics need.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub terrain: TerrainKind,
    pub difficulty: f64,
    pub actions: Vec<[f32; ACT_DIM]>,
    pub torques: Vec<[f64; ACT_DIM]>,
    /// Joint velocities observed after each step.
    pub joint_velocities: Vec<[f32; ACT_DIM]>,
    pub rewards: Vec<f64>,
    pub fell: bool,
}

impl EpisodeRecord {
    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// One row per control step, laid out as [`STEP_HEADER`].
    pub fn step_rows(&self, episode: usize) -> Vec<Vec<String>> {
        (0..self.len())
            .map(|t| {
                let mut row = vec![
                    self.terrain.to_string(),
                    self.difficulty.to_string(),
                    episode.to_string(),
                    t.to_string(),
                ];
                row.extend(self.actions[t].iter().map(|v| v.to_string()));
                row.extend(self.torques[t].iter().map(|v| v.to_string()));
                row.extend(self.joint_velocities[t].iter().map(|v| v.to_string()));
                row.push(self.rewards[t].to_string());
                row.push(self.fell.to_string());
                row
            })
            .collect()
    }
}

/// Raw per-step episode export.
pub const STEP_HEADER: [&str; 18] = [
    "terrain", "difficulty", "episode", "step", "a0", "a1", "a2", "a3", "tau0", "tau1", "tau2", "tau3", "qd0", "qd1", "qd2",
    "qd3", "reward", "fell",
];

pub const METRIC_HEADER: [&str; 11] = [
    "policy",
    "terrain",
    "difficulty",
    "episodes",
    "return_mean",
    "return_std",
    "smooth_mean",
    "smooth_std",
    "energy_mean",
    "energy_std",
    "success_rate",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub policy: String,
    pub terrain: TerrainKind,
    pub difficulty: f64,
    pub episodes: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub smooth_mean: f64,
    pub smooth_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
    /// Fraction of episodes that ended without a fall.
    pub success_rate: f64,
}

impl MetricRow {
    /// Aggregates episodes of one cell; `None` if there are none.
    pub fn from_episodes(policy: &str, terrain: TerrainKind, difficulty: f64, episodes: &[&EpisodeRecord]) -> Option<Self> {
        if episodes.is_empty() {
            return None;
        }
        let returns: Vec<f64> = episodes.iter().map(|e| e.episode_return()).collect();
        // A one-step episode has no action difference; count it as perfectly smooth.
        let smooth: Vec<f64> = episodes.iter().map(|e| smoothness(&e.actions).unwrap_or(0.0)).collect();
        let power: Vec<f64> = episodes
            .iter()
            .map(|e| energy(&e.torques, &e.joint_velocities).unwrap_or(0.0))
            .collect();
        let (return_mean, return_std) = mean_std(&returns);
        let (smooth_mean, smooth_std) = mean_std(&smooth);
        let (energy_mean, energy_std) = mean_std(&power);
        Some(Self {
            policy: policy.to_string(),
            terrain,
            difficulty,
            episodes: episodes.len(),
            return_mean,
            return_std,
            smooth_mean,
            smooth_std,
            energy_mean,
            energy_std,
            success_rate: episodes.iter().filter(|e| !e.fell).count() as f64 / episodes.len() as f64,
        })
    }

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.policy.clone(),
            self.terrain.name().to_string(),
            self.difficulty.to_string(),
            self.episodes.to_string(),
            self.return_mean.to_string(),
            self.return_std.to_string(),
            self.smooth_mean.to_string(),
            self.smooth_std.to_string(),
            self.energy_mean.to_string(),
            self.energy_std.to_string(),
            self.success_rate.to_string(),
        ]
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
