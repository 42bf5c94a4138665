/// Generalized advantage estimates for one environment.
///
/// `values` holds `V(s_0..s_{T-1})` followed by the bootstrap value of the
/// state after the last step. A done at `t` stops bootstrapping past `t`.
/// Returns `(advantages, value_targets)`.
pub fn compute_gae(rewards: &[f32], values: &[f32], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f32>, Vec<f32>) {
    let n = rewards.len();
    assert_eq!(values.len(), n + 1, "values need a bootstrap entry");
    assert_eq!(dones.len(), n, "one done flag per reward");
    let mut adv = vec![0.0f32; n];
    let mut next = 0.0f64;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] as f64 + gamma * values[t + 1] as f64 * live - values[t] as f64;
        next = delta + gamma * lambda * live * next;
        adv[t] = next as f32;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f32]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().map(|&a| a as f64).sum::<f64>() / n;
    let var = adv.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = ((*a as f64 - mean) / std) as f32;
    }
}
