use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;

/// Horizontal extent of every generated course, in metres.
pub const ARENA: (f64, f64) = (-1.0, 60.0);

pub const STAIR_WIDTH: f64 = 0.30;
const MAX_SLOPE_DEG: f64 = 25.0;
const NOISE_CELL: f64 = 0.05;
const OBSTACLE_CELL: f64 = 0.40;
const OBSTACLE_START: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerrainKind {
    SmoothSlope,
    RoughSlope,
    StairsUp,
    StairsDown,
    DiscreteObstacles,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 5] = [
        TerrainKind::SmoothSlope,
        TerrainKind::RoughSlope,
        TerrainKind::StairsUp,
        TerrainKind::StairsDown,
        TerrainKind::DiscreteObstacles,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TerrainKind::SmoothSlope => "smooth-slope",
            TerrainKind::RoughSlope => "rough-slope",
            TerrainKind::StairsUp => "stairs-up",
            TerrainKind::StairsDown => "stairs-down",
            TerrainKind::DiscreteObstacles => "discrete-obstacles",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TerrainKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| SimError::UnknownTerrain(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub kind: TerrainKind,
    pub difficulty: f64,
    pub seed: u64,
}

impl TerrainSpec {
    pub fn new(kind: TerrainKind, difficulty: f64, seed: u64) -> Self {
        Self { kind, difficulty, seed }
    }

    pub fn flat() -> Self {
        Self::new(TerrainKind::SmoothSlope, 0.0, 0)
    }
}

/// Deterministic heightfield `h(x)` expanded from a [`TerrainSpec`].
///
/// Nothing is stored per cell: random features are hashed from
/// `(seed, cell index)` on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Terrain {
    spec: TerrainSpec,
    slope: f64,
    step_height: f64,
    noise_amp: f64,
    obstacle_height: f64,
}

fn hash_unit(seed: u64, index: i64, salt: u64) -> f64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

impl Terrain {
    pub fn generate(spec: TerrainSpec) -> Result<Self, SimError> {
        let d = spec.difficulty;
        if !(0.0..=1.0).contains(&d) {
            return Err(SimError::InvalidDifficulty(d));
        }
        Ok(Self {
            spec,
            slope: (d * MAX_SLOPE_DEG).to_radians().tan(),
            step_height: 0.05 + 0.13 * d,
            noise_amp: 0.02 + 0.06 * d,
            obstacle_height: 0.03 + 0.09 * d,
        })
    }

    pub fn spec(&self) -> TerrainSpec {
        self.spec
    }

    /// Stair riser height for stair terrains, slope gradient for slopes.
    pub fn step_height(&self) -> f64 {
        self.step_height
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    fn noise(&self, x: f64) -> (f64, f64) {
        let u = x / NOISE_CELL;
        let i = u.floor();
        let frac = u - i;
        let sample = |k: i64| (hash_unit(self.spec.seed, k, 1) - 0.5) * self.noise_amp;
        let (a, b) = (sample(i as i64), sample(i as i64 + 1));
        // Noise fades in over the first cell so h stays continuous at 0.
        let ramp = (x / NOISE_CELL).min(1.0);
        let value = a + (b - a) * frac;
        let slope = (b - a) / NOISE_CELL;
        if ramp < 1.0 {
            (value * ramp, slope * ramp + value / NOISE_CELL)
        } else {
            (value, slope)
        }
    }

    fn obstacle(&self, x: f64) -> f64 {
        if x < OBSTACLE_START {
            return 0.0;
        }
        let cell = ((x - OBSTACLE_START) / OBSTACLE_CELL).floor() as i64;
        if hash_unit(self.spec.seed, cell, 2) < 0.4 {
            return 0.0;
        }
        let mag = 0.3 + 0.7 * hash_unit(self.spec.seed, cell, 3);
        let sign = if hash_unit(self.spec.seed, cell, 4) < 0.5 { -1.0 } else { 1.0 };
        sign * mag * self.obstacle_height
    }

    /// Height and gradient at `x`. `h(x) = 0` on the spawn pad `x <= 0`.
    pub fn height_and_slope(&self, x: f64) -> (f64, f64) {
        if x <= 0.0 {
            return (0.0, 0.0);
        }
        match self.spec.kind {
            TerrainKind::SmoothSlope => (self.slope * x, self.slope),
            TerrainKind::RoughSlope => {
                let (n, dn) = self.noise(x);
                (self.slope * x + n, self.slope + dn)
            }
            TerrainKind::StairsUp => ((x / STAIR_WIDTH).floor() * self.step_height, 0.0),
            TerrainKind::StairsDown => (-(x / STAIR_WIDTH).floor() * self.step_height, 0.0),
            TerrainKind::DiscreteObstacles => (self.obstacle(x), 0.0),
        }
    }

    pub fn height(&self, x: f64) -> f64 {
        self.height_and_slope(x).0
    }

    /// `(x, h(x))` on a regular grid over the arena.
    pub fn sample_grid(&self, spacing: f64) -> Vec<(f64, f64)> {
        let n = ((ARENA.1 - ARENA.0) / spacing).round() as i64;
        (0..=n)
            .map(|i| {
                let x = ARENA.0 + i as f64 * spacing;
                (x, self.height(x))
            })
            .collect()
    }
}
