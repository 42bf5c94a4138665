//! Fixed input scaling shared by every model. Vectors whose width differs
//! from the simulator layout pass through unscaled.

use crate::sim::{OBS_DIM, PRIV_DIM};

const OBS_OFFSET: [f32; OBS_DIM] = [
    0.0, 0.0, 0.0, 0.0, -1.0, 0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
];
const OBS_SCALE: [f32; OBS_DIM] = [
    2.0, 2.0, 0.25, 1.0, 1.0, 2.5, 1.0, 1.0, 1.0, 1.0, 0.05, 0.05, 0.05, 0.05, 0.5, 0.5, 0.5, 0.5,
];
const PRIV_OFFSET: [f32; PRIV_DIM] = [
    -0.32, -0.32, -0.32, -0.32, -0.32, -0.32, -0.32, -0.32, -0.32, -0.32, -0.32, 0.5, 0.5, 0.5, 0.5, 0.875,
    2.5, 55.0, 0.8,
];
const PRIV_SCALE: [f32; PRIV_DIM] = [
    3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 1.0, 1.0, 1.0, 1.0, 2.0, 0.4, 0.1, 10.0,
];
pub const ACTION_INPUT_SCALE: f32 = 0.5;

pub fn normalize_obs(raw: &[f32], out: &mut Vec<f32>) {
    if raw.len() != OBS_DIM {
        out.extend_from_slice(raw);
        return;
    }
    out.extend(raw.iter().enumerate().map(|(i, &v)| (v - OBS_OFFSET[i]) * OBS_SCALE[i]));
}

pub fn normalize_privileged(raw: &[f32], out: &mut Vec<f32>) {
    if raw.len() != PRIV_DIM {
        out.extend_from_slice(raw);
        return;
    }
    out.extend(raw.iter().enumerate().map(|(i, &v)| (v - PRIV_OFFSET[i]) * PRIV_SCALE[i]));
}

pub fn normalize_action(raw: &[f32], out: &mut Vec<f32>) {
    out.extend(raw.iter().map(|&v| v * ACTION_INPUT_SCALE));
}
