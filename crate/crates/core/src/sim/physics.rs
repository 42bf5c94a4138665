use rand::Rng;

use super::params::{sample_env_params, EnvParams, RangeSet};
use super::reward::{compute_reward, RewardBreakdown};
use super::terrain::{Terrain, TerrainSpec};
use super::*;

/// Proprioceptive observation, in order: base linear velocity in the body
/// frame (2), pitch rate (1), gravity direction in the body frame (2),
/// commanded forward velocity (1), joint angles (4), joint velocities (4),
/// previous action (4).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation(pub [f32; OBS_DIM]);

impl Observation {
    pub const BASE_LIN_VEL: std::ops::Range<usize> = 0..2;
    pub const BASE_ANG_VEL: usize = 2;
    pub const GRAVITY: std::ops::Range<usize> = 3..5;
    pub const COMMAND: usize = 5;
    pub const JOINT_POS: std::ops::Range<usize> = 6..10;
    pub const JOINT_VEL: std::ops::Range<usize> = 10..14;
    pub const LAST_ACTION: std::ops::Range<usize> = 14..18;

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn joint_velocities(&self) -> [f32; ACT_DIM] {
        std::array::from_fn(|i| self.0[Self::JOINT_VEL.start + i])
    }

    pub fn gravity(&self) -> [f32; 2] {
        [self.0[3], self.0[4]]
    }
}

/// Teacher-only information: heightmap samples relative to the base height
/// (11), foot contact flags (4), friction, added mass, kp, kd.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivilegedInfo(pub [f32; PRIV_DIM]);

impl PrivilegedInfo {
    pub const HEIGHTS: std::ops::Range<usize> = 0..NUM_HEIGHT_SAMPLES;
    pub const CONTACTS: std::ops::Range<usize> = 11..15;
    pub const PARAMS: std::ops::Range<usize> = 15..19;

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn heights(&self) -> &[f32] {
        &self.0[Self::HEIGHTS]
    }

    pub fn contacts(&self) -> &[f32] {
        &self.0[Self::CONTACTS]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub x: f64,
    pub z: f64,
    pub pitch: f64,
    pub vx: f64,
    pub vz: f64,
    pub pitch_rate: f64,
    pub q: [f64; ACT_DIM],
    pub qd: [f64; ACT_DIM],
    pub prev_action: [f64; ACT_DIM],
    pub prev_torque: [f64; ACT_DIM],
    pub contact: [bool; ACT_DIM],
    pub steps: u32,
    pub command: f64,
    pub terrain: Terrain,
    pub params: EnvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub privileged: PrivilegedInfo,
    pub reward: f64,
    pub done: bool,
    /// The episode ended by falling rather than by the step cap.
    pub fell: bool,
    pub torques: [f64; ACT_DIM],
    pub breakdown: RewardBreakdown,
}

/// `kp (q_d - q) + kd (qd_d - qd)`, clamped to the motor limit.
pub fn pd_torque(q_target: f64, q: f64, qd_target: f64, qd: f64, kp: f64, kd: f64) -> f64 {
    (kp * (q_target - q) + kd * (qd_target - qd)).clamp(-TORQUE_LIMIT, TORQUE_LIMIT)
}

fn body_inertia(mass: f64) -> f64 {
    mass * (BODY_LENGTH * BODY_LENGTH + BODY_HEIGHT * BODY_HEIGHT) / 12.0
}

/// Starts an episode on the flat spawn pad with a slightly perturbed pose.
pub fn reset(spec: TerrainSpec, ranges: RangeSet, rng: &mut impl Rng) -> Result<(SimState, Observation, PrivilegedInfo), SimError> {
    let terrain = Terrain::generate(spec)?;
    let params = sample_env_params(ranges, rng);
    let x = -0.5 * rng.gen::<f64>();
    let pitch = 0.05 * (2.0 * rng.gen::<f64>() - 1.0);
    let q = std::array::from_fn(|_| 0.05 * (2.0 * rng.gen::<f64>() - 1.0));
    let state = SimState {
        x,
        z: STANDING_HEIGHT + terrain.height(x),
        pitch,
        vx: 0.0,
        vz: 0.0,
        pitch_rate: 0.0,
        q,
        qd: [0.0; ACT_DIM],
        prev_action: [0.0; ACT_DIM],
        prev_torque: [0.0; ACT_DIM],
        contact: [false; ACT_DIM],
        steps: 0,
        command: COMMAND_VELOCITY,
        terrain,
        params,
    };
    let obs = state.observe();
    let privileged = state.privileged();
    Ok((state, obs, privileged))
}

struct LegForce {
    force: (f64, f64),
    foot: (f64, f64),
    hip: (f64, f64),
    contact: bool,
}

impl SimState {
    fn is_finite(&self) -> bool {
        [self.x, self.z, self.pitch, self.vx, self.vz, self.pitch_rate]
            .iter()
            .chain(&self.q)
            .chain(&self.qd)
            .all(|v| v.is_finite())
    }

    pub fn mass(&self) -> f64 {
        BASE_MASS + self.params.added_mass
    }

    /// Base height above the terrain directly below it.
    pub fn height_above_ground(&self) -> f64 {
        self.z - self.terrain.height(self.x)
    }

    fn to_world(&self, bx: f64, bz: f64) -> (f64, f64) {
        let (s, c) = self.pitch.sin_cos();
        (bx * c - bz * s, bx * s + bz * c)
    }

    fn leg_force(&self, leg: usize) -> LegForce {
        let (hx, hz) = self.to_world(HIP_X[leg], HIP_Z);
        let phi = self.pitch + self.q[leg];
        let (sp, cp) = phi.sin_cos();
        let (fx, fz) = (self.x + hx + LEG_LENGTH * sp, self.z + hz - LEG_LENGTH * cp);
        let (rx, rz) = (fx - self.x, fz - self.z);
        let phi_rate = self.pitch_rate + self.qd[leg];
        let vx = self.vx - self.pitch_rate * rz + LEG_LENGTH * phi_rate * cp;
        let vz = self.vz + self.pitch_rate * rx + LEG_LENGTH * phi_rate * sp;
        let (h, slope) = self.terrain.height_and_slope(fx);
        let norm = (1.0 + slope * slope).sqrt();
        let (nx, nz) = (-slope / norm, 1.0 / norm);
        let (tx, tz) = (1.0 / norm, slope / norm);
        let depth = (h - fz) / norm;
        let mut force = (0.0, 0.0);
        let mut contact = false;
        if depth > 0.0 {
            let vn = vx * nx + vz * nz;
            let normal = (CONTACT_STIFFNESS * depth - CONTACT_DAMPING * vn).max(0.0);
            if normal > 0.0 {
                contact = true;
                let vt = vx * tx + vz * tz;
                let limit = self.params.friction * normal;
                let tangential = (-TANGENT_DAMPING * vt).clamp(-limit, limit);
                force = (normal * nx + tangential * tx, normal * nz + tangential * tz);
            }
        }
        LegForce {
            force,
            foot: (fx, fz),
            hip: (self.x + hx, self.z + hz),
            contact,
        }
    }

    fn substep(&mut self, targets: &[f64; ACT_DIM]) -> [f64; ACT_DIM] {
        let mass = self.mass();
        let inertia = body_inertia(mass);
        let (mut fx, mut fz, mut torque) = (0.0, -mass * GRAVITY, 0.0);
        let mut qdd = [0.0; ACT_DIM];
        let mut applied = [0.0; ACT_DIM];
        for leg in 0..ACT_DIM {
            let lf = self.leg_force(leg);
            let tau = pd_torque(targets[leg], self.q[leg], 0.0, self.qd[leg], self.params.kp, self.params.kd);
            let (rx, rz) = (lf.foot.0 - lf.hip.0, lf.foot.1 - lf.hip.1);
            let ground = rx * lf.force.1 - rz * lf.force.0;
            qdd[leg] = (tau + ground) / LEG_INERTIA;
            applied[leg] = tau;
            fx += lf.force.0;
            fz += lf.force.1;
            let (cx, cz) = (lf.foot.0 - self.x, lf.foot.1 - self.z);
            torque += cx * lf.force.1 - cz * lf.force.0;
            self.contact[leg] = lf.contact;
        }
        self.vx += fx / mass * PHYSICS_DT;
        self.vz += fz / mass * PHYSICS_DT;
        self.pitch_rate += torque / inertia * PHYSICS_DT;
        self.x += self.vx * PHYSICS_DT;
        self.z += self.vz * PHYSICS_DT;
        self.pitch += self.pitch_rate * PHYSICS_DT;
        for leg in 0..ACT_DIM {
            self.qd[leg] += qdd[leg] * PHYSICS_DT;
            self.q[leg] += self.qd[leg] * PHYSICS_DT;
            if self.q[leg] > JOINT_LIMIT {
                self.q[leg] = JOINT_LIMIT;
                self.qd[leg] = self.qd[leg].min(0.0);
            } else if self.q[leg] < -JOINT_LIMIT {
                self.q[leg] = -JOINT_LIMIT;
                self.qd[leg] = self.qd[leg].max(0.0);
            }
        }
        applied
    }

    pub fn observe(&self) -> Observation {
        let (s, c) = self.pitch.sin_cos();
        let mut o = [0.0f32; OBS_DIM];
        o[0] = (self.vx * c + self.vz * s) as f32;
        o[1] = (-self.vx * s + self.vz * c) as f32;
        o[2] = self.pitch_rate as f32;
        o[3] = (-s) as f32;
        o[4] = (-c) as f32;
        o[5] = self.command as f32;
        for j in 0..ACT_DIM {
            o[6 + j] = self.q[j] as f32;
            o[10 + j] = self.qd[j] as f32;
            o[14 + j] = self.prev_action[j] as f32;
        }
        Observation(o)
    }

    pub fn privileged(&self) -> PrivilegedInfo {
        let mut e = [0.0f32; PRIV_DIM];
        for (i, off) in height_offsets().iter().enumerate() {
            e[i] = (self.terrain.height(self.x + off) - self.z) as f32;
        }
        for j in 0..ACT_DIM {
            e[11 + j] = if self.contact[j] { 1.0 } else { 0.0 };
        }
        e[15..19].copy_from_slice(&self.params.to_array());
        PrivilegedInfo(e)
    }

    /// Advances one 50 Hz control period (four physics substeps).
    pub fn step(&mut self, action: [f32; ACT_DIM]) -> Result<StepResult, SimError> {
        if action.iter().any(|a| !a.is_finite()) {
            return Err(SimError::NonFiniteAction(action));
        }
        let action: [f64; ACT_DIM] = std::array::from_fn(|i| (action[i] as f64).clamp(-ACTION_CLIP, ACTION_CLIP));
        let targets: [f64; ACT_DIM] = std::array::from_fn(|i| ACTION_SCALE * action[i]);
        let qd_before = self.qd;
        let mut torques = [0.0; ACT_DIM];
        for _ in 0..SUBSTEPS {
            torques = self.substep(&targets);
        }
        self.steps += 1;
        if !self.is_finite() {
            return Err(SimError::Diverged(Box::new(self.clone())));
        }
        let fell = self.height_above_ground() < FALL_HEIGHT || self.pitch.abs() > FALL_PITCH;
        let done = fell || self.steps >= MAX_EPISODE_STEPS;
        let joint_acc: [f64; ACT_DIM] = std::array::from_fn(|i| (self.qd[i] - qd_before[i]) / CONTROL_DT);
        let breakdown = compute_reward(self, &action, &torques, &self.prev_torque, &joint_acc, fell);
        self.prev_action = action;
        self.prev_torque = torques;
        Ok(StepResult {
            obs: self.observe(),
            privileged: self.privileged(),
            reward: breakdown.total(),
            done,
            fell,
            torques,
            breakdown,
        })
    }
}

/// Free-function form of [`SimState::step`].
pub fn step(state: &mut SimState, action: [f32; ACT_DIM]) -> Result<StepResult, SimError> {
    state.step(action)
}
