use rand::seq::SliceRandom;
use rand::Rng;

use crate::math::{AdamState, Gradients, MathError, ParamSet, Scalar, Tape, Tensor, Var};
use crate::models::TeacherModel;
use crate::parallel::map_shards;
use crate::sim::ACT_DIM;

use super::{normalize_advantages, PpoConfig, PpoError, RolloutBuffer, ValueNorm};

/// Tensors for one set of records, normalized and ready for a tape.
pub struct Minibatch<F: Scalar> {
    pub obs: Tensor<F>,
    pub privileged: Tensor<F>,
    pub actions: Tensor<F>,
    pub old_log_probs: Tensor<F>,
    pub advantages: Tensor<F>,
    pub returns: Tensor<F>,
}

impl<F: Scalar> Minibatch<F> {
    pub fn gather(
        model: &TeacherModel,
        buf: &RolloutBuffer,
        advantages: &[f32],
        returns: &[f32],
        idx: &[usize],
        vnorm: &ValueNorm,
    ) -> Result<Self, PpoError> {
        let n = idx.len();
        let o: Vec<&[f32]> = idx.iter().map(|&i| buf.obs[i].as_slice()).collect();
        let e: Vec<&[f32]> = idx.iter().map(|&i| buf.privileged[i].as_slice()).collect();
        let cast = |v: Vec<f32>| v.into_iter().map(|x| F::of(x as f64)).collect::<Vec<F>>();
        Ok(Self {
            obs: model.obs_tensor(&o)?,
            privileged: model.privileged_tensor(&e)?,
            actions: Tensor::new(&[n, ACT_DIM], cast(idx.iter().flat_map(|&i| buf.actions[i]).collect()))?,
            old_log_probs: Tensor::new(&[n], cast(idx.iter().map(|&i| buf.log_probs[i]).collect()))?,
            advantages: Tensor::new(&[n], cast(idx.iter().map(|&i| advantages[i]).collect()))?,
            returns: Tensor::new(&[n, 1], cast(idx.iter().map(|&i| vnorm.normalize(returns[i])).collect()))?,
        })
    }

    pub fn len(&self) -> usize {
        self.old_log_probs.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handles of the loss pieces on a tape.
pub struct LossTerms {
    pub total: Var,
    pub surrogate: Var,
    pub value_loss: Var,
    pub entropy: Var,
    pub ratio: Var,
}

/// `-min(rho A, clip(rho) A) + c_v (V - R)^2 - c_e H`, averaged over the batch.
/// The value head and `returns` live in normalized units.
pub fn ppo_loss<F: Scalar>(
    tape: &mut Tape<F>,
    model: &TeacherModel,
    params: &ParamSet<F>,
    mb: &Minibatch<F>,
    clip: f64,
    value_coef: f64,
    entropy_coef: f64,
) -> Result<LossTerms, MathError> {
    let o = tape.constant(mb.obs.clone())?;
    let e = tape.constant(mb.privileged.clone())?;
    let l = model.encode(tape, params, e)?;
    let out = model.policy(tape, params, o, l)?;
    let lp = tape.gaussian_log_prob(out.mean, out.log_std, &mb.actions)?;
    let old = tape.constant(mb.old_log_probs.clone())?;
    let diff = tape.sub(lp, old)?;
    let ratio = tape.exp(diff)?;
    let adv = tape.constant(mb.advantages.clone())?;
    let s1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, F::of(1.0 - clip), F::of(1.0 + clip))?;
    let s2 = tape.mul(clipped, adv)?;
    let s = tape.minimum(s1, s2)?;
    let surrogate = tape.mean(s)?;
    let v = model.value(tape, params, o, l)?;
    let value_loss = tape.mse(v, &mb.returns, None)?;
    // Differential entropy of a diagonal Gaussian: sum_j log_std_j + a/2 ln(2 pi e).
    let ls_sum = tape.sum(out.log_std)?;
    let k = tape.constant(Tensor::scalar(F::of(
        0.5 * ACT_DIM as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln(),
    )))?;
    let entropy = tape.add(ls_sum, k)?;
    let a = tape.scale(surrogate, -F::one())?;
    let b = tape.scale(value_loss, F::of(value_coef))?;
    let c = tape.scale(entropy, F::of(-entropy_coef))?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossTerms {
        total,
        surrogate,
        value_loss,
        entropy,
        ratio,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Combined loss of the first minibatch before any step was taken.
    pub initial_loss: f64,
    /// Global gradient norm of the encoder on the first minibatch.
    pub encoder_grad_norm: f64,
    pub epochs_run: usize,
    pub minibatches: usize,
    pub early_stopped: bool,
}

struct ShardResult {
    grads: Gradients<f32>,
    weight: f64,
    total: f64,
    surrogate: f64,
    value_loss: f64,
    entropy: f64,
    kl: f64,
    clip_frac: f64,
}

/// Sharded loss and gradient of one minibatch; shard losses are batch means,
/// so gradients are combined weighted by shard size.
fn minibatch_gradients(
    model: &TeacherModel,
    params: &ParamSet<f32>,
    buf: &RolloutBuffer,
    adv: &[f32],
    returns: &[f32],
    idx: &[usize],
    cfg: &PpoConfig,
    vnorm: &ValueNorm,
) -> Result<(Gradients<f32>, ShardResult), PpoError> {
    let parts = map_shards(idx, cfg.grad_shards, |chunk| -> Result<ShardResult, PpoError> {
        let mb = Minibatch::<f32>::gather(model, buf, adv, returns, chunk, vnorm)?;
        let mut tape = Tape::eval();
        let terms = ppo_loss(&mut tape, model, params, &mb, cfg.clip, cfg.value_coef, cfg.entropy_coef)?;
        let ratio = tape.value(terms.ratio).to_vec();
        let mut kl = 0.0;
        let mut clipped = 0usize;
        for &r in &ratio {
            let r = r as f64;
            kl += (r - 1.0) - r.ln();
            if (r - 1.0).abs() > cfg.clip {
                clipped += 1;
            }
        }
        let n = ratio.len() as f64;
        let res = ShardResult {
            grads: params.zero_grads(),
            weight: n / idx.len() as f64,
            total: tape.value(terms.total).item() as f64,
            surrogate: tape.value(terms.surrogate).item() as f64,
            value_loss: tape.value(terms.value_loss).item() as f64,
            entropy: tape.value(terms.entropy).item() as f64,
            kl: kl / n,
            clip_frac: clipped as f64 / n,
        };
        let grads = tape.backward(terms.total, params)?;
        Ok(ShardResult { grads, ..res })
    });
    let mut grads = params.zero_grads();
    let mut acc = ShardResult {
        grads: params.zero_grads(),
        weight: 0.0,
        total: 0.0,
        surrogate: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
        kl: 0.0,
        clip_frac: 0.0,
    };
    for p in parts {
        let mut p = p?;
        p.grads.scale(p.weight as f32);
        grads.add_assign(&p.grads);
        acc.weight += p.weight;
        acc.total += p.weight * p.total;
        acc.surrogate += p.weight * p.surrogate;
        acc.value_loss += p.weight * p.value_loss;
        acc.entropy += p.weight * p.entropy;
        acc.kl += p.weight * p.kl;
        acc.clip_frac += p.weight * p.clip_frac;
    }
    Ok((grads, acc))
}

/// Several epochs of clipped-surrogate updates over shuffled minibatches.
/// Stops early when the approximate KL of a minibatch exceeds `target_kl`.
pub fn ppo_update(
    model: &TeacherModel,
    params: &mut ParamSet<f32>,
    adam: &mut AdamState,
    vnorm: &mut ValueNorm,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<UpdateStats, PpoError> {
    let (mut adv, returns) = buf.advantages(cfg.gamma, cfg.lambda);
    vnorm.update(&returns);
    normalize_advantages(&mut adv);
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let mut count = 0.0;
    'epochs: for _ in 0..cfg.epochs {
        stats.epochs_run += 1;
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch_size.max(1)) {
            let (mut grads, r) = minibatch_gradients(model, params, buf, &adv, &returns, idx, cfg, vnorm)?;
            if !r.total.is_finite() {
                return Err(PpoError::Math(MathError::NonFinite { op: "ppo loss" }));
            }
            if stats.minibatches == 0 {
                stats.initial_loss = r.total;
                stats.encoder_grad_norm = model
                    .encoder
                    .layers
                    .iter()
                    .flat_map(|l| [l.weight, l.bias])
                    .flat_map(|id| grads.get(id).iter().map(|&g| (g as f64).powi(2)).collect::<Vec<_>>())
                    .sum::<f64>()
                    .sqrt();
            }
            stats.minibatches += 1;
            stats.policy_loss += -r.surrogate;
            stats.value_loss += r.value_loss;
            stats.entropy += r.entropy;
            stats.approx_kl += r.kl;
            stats.clip_fraction += r.clip_frac;
            count += 1.0;
            if r.kl > cfg.target_kl {
                stats.early_stopped = true;
                break 'epochs;
            }
            grads.clip_global_norm(cfg.max_grad_norm as f32);
            adam.step(params, &grads, lr)?;
        }
    }
    if count > 0.0 {
        stats.policy_loss /= count;
        stats.value_loss /= count;
        stats.entropy /= count;
        stats.approx_kl /= count;
        stats.clip_fraction /= count;
    }
    Ok(stats)
}
