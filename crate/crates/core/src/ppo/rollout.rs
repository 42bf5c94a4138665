use rand::Rng;
use rand_distr::StandardNormal;

use crate::math::{ParamSet, Tape, Tensor};
use crate::models::TeacherModel;
use crate::parallel::map_shards;
use crate::sim::{RewardBreakdown, EpisodeSummary, Observation, PrivilegedInfo, VecEnv, ACT_DIM};

use super::{PpoError, ValueNorm};

/// Fixed-horizon batch of transitions, stored step-major: record
/// `t * num_envs + e` is environment `e` at step `t`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub num_envs: usize,
    pub obs: Vec<Observation>,
    pub privileged: Vec<PrivilegedInfo>,
    pub actions: Vec<[f32; ACT_DIM]>,
    pub log_probs: Vec<f32>,
    pub values: Vec<f32>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    /// Value of the state reached after the last step, per environment.
    pub last_values: Vec<f32>,
    /// Velocity-tracking reward term of each record.
    pub tracking: Vec<f32>,
    pub finished: Vec<EpisodeSummary>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Advantages (unnormalized) and value targets in record order.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> (Vec<f32>, Vec<f32>) {
        let (h, n) = (self.horizon, self.num_envs);
        let mut adv = vec![0.0; h * n];
        let mut targets = vec![0.0; h * n];
        for e in 0..n {
            let r: Vec<f32> = (0..h).map(|t| self.rewards[t * n + e]).collect();
            let d: Vec<bool> = (0..h).map(|t| self.dones[t * n + e]).collect();
            let mut v: Vec<f32> = (0..h).map(|t| self.values[t * n + e]).collect();
            v.push(self.last_values[e]);
            let (a, ret) = super::compute_gae(&r, &v, &d, gamma, lambda);
            for t in 0..h {
                adv[t * n + e] = a[t];
                targets[t * n + e] = ret[t];
            }
        }
        (adv, targets)
    }
}

/// Mean action, value and the log-probability of `mean + std * noise` for a batch.
pub(crate) struct PolicyEval {
    pub actions: Vec<[f32; ACT_DIM]>,
    pub log_probs: Vec<f32>,
    pub values: Vec<f32>,
}

pub(crate) fn evaluate_policy(
    model: &TeacherModel,
    params: &ParamSet<f32>,
    vnorm: &ValueNorm,
    obs: &[Observation],
    privileged: &[PrivilegedInfo],
    noise: &[[f32; ACT_DIM]],
    shards: usize,
) -> Result<PolicyEval, PpoError> {
    let idx: Vec<usize> = (0..obs.len()).collect();
    let parts = map_shards(&idx, shards, |chunk| -> Result<PolicyEval, PpoError> {
        let o: Vec<&[f32]> = chunk.iter().map(|&i| obs[i].as_slice()).collect();
        let e: Vec<&[f32]> = chunk.iter().map(|&i| privileged[i].as_slice()).collect();
        let mut tape = Tape::eval();
        let ov = tape.constant(model.obs_tensor(&o)?)?;
        let ev = tape.constant(model.privileged_tensor(&e)?)?;
        let l = model.encode(&mut tape, params, ev)?;
        let out = model.policy(&mut tape, params, ov, l)?;
        let v = model.value(&mut tape, params, ov, l)?;
        let mean = tape.value(out.mean).to_vec();
        let std: Vec<f32> = tape.value(out.log_std).data().iter().map(|s| s.exp()).collect();
        let mut actions = Vec::with_capacity(chunk.len());
        for (r, &i) in chunk.iter().enumerate() {
            actions.push(std::array::from_fn(|j| mean[r * ACT_DIM + j] + std[j] * noise[i][j]));
        }
        let flat: Vec<f32> = actions.iter().flat_map(|a: &[f32; ACT_DIM]| a.iter().copied()).collect();
        let at = Tensor::new(&[chunk.len(), ACT_DIM], flat)?;
        let lp = tape.gaussian_log_prob(out.mean, out.log_std, &at)?;
        Ok(PolicyEval {
            actions,
            log_probs: tape.value(lp).to_vec(),
            values: tape.value(v).data().iter().map(|&x| vnorm.denormalize(x)).collect(),
        })
    });
    let mut all = PolicyEval {
        actions: Vec::with_capacity(obs.len()),
        log_probs: Vec::with_capacity(obs.len()),
        values: Vec::with_capacity(obs.len()),
    };
    for p in parts {
        let p = p?;
        all.actions.extend(p.actions);
        all.log_probs.extend(p.log_probs);
        all.values.extend(p.values);
    }
    Ok(all)
}

/// Reward fed to PPO. With `only_positive` the shaped part is clipped at zero
/// and only the fall penalty can make it negative, so early termination never
/// pays off while exploration noise is large.
pub fn training_reward(b: &RewardBreakdown, only_positive: bool) -> f64 {
    if only_positive {
        (b.total() - b.fall).max(0.0) + b.fall
    } else {
        b.total()
    }
}

/// Runs the stochastic teacher for `horizon` steps in every environment.
/// Environments reset themselves when an episode ends.
pub fn collect_rollout(
    envs: &mut VecEnv,
    model: &TeacherModel,
    params: &ParamSet<f32>,
    vnorm: &ValueNorm,
    horizon: usize,
    shards: usize,
    only_positive: bool,
    rng: &mut impl Rng,
) -> Result<RolloutBuffer, PpoError> {
    let n = envs.len();
    let mut buf = RolloutBuffer {
        horizon,
        num_envs: n,
        ..Default::default()
    };
    for _ in 0..horizon {
        let obs = envs.observations();
        let privileged = envs.privileged();
        for (i, (o, e)) in obs.iter().zip(&privileged).enumerate() {
            if !o.0.iter().chain(e.0.iter()).all(|v| v.is_finite()) {
                return Err(PpoError::NonFinite { env: i, what: "observation" });
            }
        }
        let noise: Vec<[f32; ACT_DIM]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.sample::<f32, _>(StandardNormal)))
            .collect();
        let pe = evaluate_policy(model, params, vnorm, &obs, &privileged, &noise, shards)?;
        if let Some(i) = pe.actions.iter().position(|a| !a.iter().all(|v| v.is_finite())) {
            return Err(PpoError::NonFinite { env: i, what: "action" });
        }
        let steps = envs.step(&pe.actions).map_err(|(env, source)| PpoError::Sim { env, source })?;
        for s in steps {
            buf.rewards.push(training_reward(&s.result.breakdown, only_positive) as f32);
            buf.dones.push(s.result.done);
            buf.tracking.push(s.result.breakdown.tracking as f32);
            if let Some(f) = s.finished {
                buf.finished.push(f);
            }
        }
        buf.obs.extend(obs);
        buf.privileged.extend(privileged);
        buf.actions.extend(pe.actions);
        buf.log_probs.extend(pe.log_probs);
        buf.values.extend(pe.values);
    }
    let zero = vec![[0.0; ACT_DIM]; n];
    let last = evaluate_policy(model, params, vnorm, &envs.observations(), &envs.privileged(), &zero, shards)?;
    buf.last_values = last.values;
    Ok(buf)
}
