//! Planar quadruped surrogate: a rigid base in the x-z plane carried by four
//! single-joint massless legs, penalty contact against a 1-D heightfield, PD
//! position actuation and domain-randomized physical parameters.

mod params;
mod physics;
mod reward;
mod terrain;
mod vec_env;

pub use params::{sample_env_params, EnvParams, ParamRanges, RangeSet};
pub use physics::{pd_torque, reset, step, Observation, PrivilegedInfo, SimState, StepResult};
pub use reward::{compute_reward, RewardBreakdown};
pub use terrain::{Terrain, TerrainKind, TerrainSpec, ARENA, STAIR_WIDTH};
pub use vec_env::{EnvSlot, EpisodeSummary, TerrainSampler, VecEnv, VecStep};

pub const OBS_DIM: usize = 18;
pub const PRIV_DIM: usize = 19;
pub const ACT_DIM: usize = 4;
pub const NUM_HEIGHT_SAMPLES: usize = 11;

pub const CONTROL_DT: f64 = 0.02;
pub const SUBSTEPS: usize = 4;
pub const PHYSICS_DT: f64 = CONTROL_DT / SUBSTEPS as f64;
pub const MAX_EPISODE_STEPS: u32 = 1000;
pub const COMMAND_VELOCITY: f64 = 0.4;

pub const GRAVITY: f64 = 9.81;
pub const BASE_MASS: f64 = 12.0;
pub const BODY_LENGTH: f64 = 0.6;
pub const BODY_HEIGHT: f64 = 0.1;
pub const LEG_LENGTH: f64 = 0.25;
pub const HIP_X: [f64; 4] = [-0.3, -0.1, 0.1, 0.3];
/// Hips sit below the base reference point so the straight legs reach the
/// ground exactly at standing height.
pub const HIP_Z: f64 = -(STANDING_HEIGHT - LEG_LENGTH);
pub const STANDING_HEIGHT: f64 = 0.32;
pub const LEG_INERTIA: f64 = 0.05;
pub const JOINT_LIMIT: f64 = std::f64::consts::FRAC_PI_3;
pub const TORQUE_LIMIT: f64 = 33.5;
pub const ACTION_SCALE: f64 = 0.5;
pub const ACTION_CLIP: f64 = 3.0;

pub const CONTACT_STIFFNESS: f64 = 2.0e4;
pub const CONTACT_DAMPING: f64 = 100.0;
pub const TANGENT_DAMPING: f64 = 300.0;

pub const FALL_HEIGHT: f64 = 0.12;
pub const FALL_PITCH: f64 = 1.0;

/// Horizontal offsets of the heightmap samples around the base, metres.
pub fn height_offsets() -> [f64; NUM_HEIGHT_SAMPLES] {
    std::array::from_fn(|i| -0.5 + 0.1 * i as f64)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("unknown terrain kind {0:?}")]
    UnknownTerrain(String),
    #[error("difficulty {0} outside [0, 1]")]
    InvalidDifficulty(f64),
    #[error("non-finite action {0:?}")]
    NonFiniteAction([f32; ACT_DIM]),
    #[error("simulation diverged at step {}: {:?}", .0.steps, .0)]
    Diverged(Box<SimState>),
}
