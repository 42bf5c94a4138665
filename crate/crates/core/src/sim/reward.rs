use super::physics::SimState;
use super::{ACT_DIM, COMMAND_VELOCITY};

const TRACKING_SIGMA: f64 = 0.25;

/// Per-term reward for one control step; [`RewardBreakdown::total`] is the reward.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardBreakdown {
    pub tracking: f64,
    pub vertical_velocity: f64,
    pub pitch_rate: f64,
    pub torque: f64,
    pub joint_acceleration: f64,
    pub action: f64,
    pub torque_rate: f64,
    pub fall: f64,
}

impl RewardBreakdown {
    pub fn terms(&self) -> [f64; 8] {
        [
            self.tracking,
            self.vertical_velocity,
            self.pitch_rate,
            self.torque,
            self.joint_acceleration,
            self.action,
            self.torque_rate,
            self.fall,
        ]
    }

    pub fn total(&self) -> f64 {
        self.terms().iter().sum()
    }
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Velocity tracking plus penalties on off-axis motion, torque, joint
/// acceleration, action magnitude, torque changes and falling.
pub fn compute_reward(
    state: &SimState,
    action: &[f64; ACT_DIM],
    torques: &[f64; ACT_DIM],
    prev_torques: &[f64; ACT_DIM],
    joint_acc: &[f64; ACT_DIM],
    fell: bool,
) -> RewardBreakdown {
    let err = state.vx - COMMAND_VELOCITY;
    let torque_delta: Vec<f64> = torques.iter().zip(prev_torques).map(|(a, b)| a - b).collect();
    RewardBreakdown {
        tracking: (-(err * err) / (TRACKING_SIGMA * TRACKING_SIGMA)).exp(),
        vertical_velocity: -2.0 * state.vz * state.vz,
        pitch_rate: -0.05 * state.pitch_rate * state.pitch_rate,
        torque: -1e-4 * sum_sq(torques),
        joint_acceleration: -2.5e-7 * sum_sq(joint_acc),
        action: -0.01 * sum_sq(action),
        torque_rate: -0.01 * sum_sq(&torque_delta),
        fall: if fell { -1.0 } else { 0.0 },
    }
}
