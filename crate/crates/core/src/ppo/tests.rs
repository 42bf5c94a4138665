use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::math::{Tape, Tensor};
use crate::sim::{RewardBreakdown, ACT_DIM};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_spec() -> TeacherSpec {
    TeacherSpec {
        encoder_hidden: vec![16],
        policy_hidden: vec![32, 16],
        value_hidden: vec![16],
        init_log_std: -1.0,
        ..TeacherSpec::default()
    }
}

fn small_cfg() -> PpoConfig {
    PpoConfig {
        num_envs: 6,
        horizon: 8,
        minibatch_size: 16,
        epochs: 2,
        grad_shards: 3,
        ..PpoConfig::default()
    }
}

fn fixture(seed: u64) -> (TeacherModel, ParamSet<f32>, RolloutBuffer) {
    let cfg = small_cfg();
    let mut params = ParamSet::new();
    let model = TeacherModel::init(small_spec(), &mut params, &mut rng(seed)).unwrap();
    let mut envs = VecEnv::new(cfg.num_envs, seed, TerrainSampler::all(0.5), RangeSet::Training).unwrap();
    let buf = collect_rollout(&mut envs, &model, &params, &ValueNorm::default(), cfg.horizon, cfg.grad_shards, true, &mut rng(seed + 1)).unwrap();
    (model, params, buf)
}

/// Double loop over the definition `A_t = sum_k (gamma lambda)^(k-t) delta_k`,
/// truncated at the first done at or after `t`.
fn brute_force_gae(r: &[f32], v: &[f32], d: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut weight = 1.0;
            for k in t..n {
                let live = if d[k] { 0.0 } else { 1.0 };
                let delta = r[k] as f64 + gamma * v[k + 1] as f64 * live - v[k] as f64;
                total += weight * delta;
                if d[k] {
                    break;
                }
                weight *= gamma * lambda;
            }
            total
        })
        .collect()
}

#[test]
fn gae_reduces_to_monte_carlo_with_unit_discounts() {
    let (adv, targets) = compute_gae(&[1.0, 1.0], &[0.0, 0.0, 0.0], &[false, false], 1.0, 1.0);
    assert_eq!(adv, vec![2.0, 1.0]);
    assert_eq!(targets, vec![2.0, 1.0]);
}

#[test]
fn done_cuts_bootstrapping() {
    let (adv, _) = compute_gae(&[0.5, 2.0, 1.0], &[0.1, 0.3, 0.7, 5.0], &[false, true, false], 0.9, 0.8);
    assert!((adv[1] - (2.0 - 0.3)).abs() < 1e-6);
}

#[test]
fn gae_matches_brute_force_recursion() {
    let mut r = rng(1);
    for _ in 0..100 {
        let n = r.gen_range(1..40);
        let rewards: Vec<f32> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let values: Vec<f32> = (0..=n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| r.gen_bool(0.15)).collect();
        let gamma = r.gen_range(0.8..1.0);
        let lambda = r.gen_range(0.5..1.0);
        let (adv, _) = compute_gae(&rewards, &values, &dones, gamma, lambda);
        let oracle = brute_force_gae(&rewards, &values, &dones, gamma, lambda);
        for (a, o) in adv.iter().zip(&oracle) {
            assert!((*a as f64 - o).abs() <= 1e-6 * o.abs().max(1.0), "{a} vs {o}");
        }
    }
}

#[test]
fn normalized_advantages_have_zero_mean_unit_std() {
    let mut r = rng(2);
    let mut adv: Vec<f32> = (0..500).map(|_| r.gen_range(-5.0..20.0)).collect();
    normalize_advantages(&mut adv);
    let n = adv.len() as f64;
    let mean = adv.iter().map(|&a| a as f64).sum::<f64>() / n;
    let std = (adv.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() <= 1e-6);
    assert!((std - 1.0).abs() <= 1e-3);
}

#[test]
fn rollout_has_horizon_times_envs_records_and_is_deterministic() {
    let (_, _, a) = fixture(3);
    let (_, _, b) = fixture(3);
    let cfg = small_cfg();
    assert_eq!(a.len(), cfg.horizon * cfg.num_envs);
    assert_eq!(a.obs.len(), a.len());
    assert_eq!(a.last_values.len(), cfg.num_envs);
    assert_eq!(a.actions, b.actions);
    assert_eq!(a.rewards, b.rewards);
    assert_eq!(a.log_probs, b.log_probs);
}

#[test]
fn stored_log_probs_match_recomputation() {
    let (model, params, buf) = fixture(4);
    let idx: Vec<usize> = (0..buf.len()).collect();
    let zeros = vec![0.0; buf.len()];
    let mb = Minibatch::<f32>::gather(&model, &buf, &zeros, &zeros, &idx, &ValueNorm::default()).unwrap();
    let mut tape = Tape::eval();
    let o = tape.constant(mb.obs.clone()).unwrap();
    let e = tape.constant(mb.privileged.clone()).unwrap();
    let l = model.encode(&mut tape, &params, e).unwrap();
    let out = model.policy(&mut tape, &params, o, l).unwrap();
    let lp = tape.gaussian_log_prob(out.mean, out.log_std, &mb.actions).unwrap();
    for (a, b) in tape.value(lp).data().iter().zip(&buf.log_probs) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn surrogate_equals_mean_advantage_at_the_behavior_policy() {
    let (model, params, buf) = fixture(5);
    let (mut adv, returns) = buf.advantages(0.99, 0.95);
    normalize_advantages(&mut adv);
    let idx: Vec<usize> = (0..buf.len()).collect();
    let mb = Minibatch::<f32>::gather(&model, &buf, &adv, &returns, &idx, &ValueNorm::default()).unwrap();
    let mut tape = Tape::eval();
    let terms = ppo_loss(&mut tape, &model, &params, &mb, 0.2, 1.0, 0.0).unwrap();
    assert!(tape.value(terms.ratio).data().iter().all(|r| (r - 1.0).abs() < 1e-5));
    let surrogate = tape.value(terms.surrogate).item();
    let mean_adv = adv.iter().sum::<f32>() / adv.len() as f32;
    assert!((surrogate - mean_adv).abs() < 1e-4);
    assert!(surrogate.abs() < 1e-4);
}

#[test]
fn clipped_branch_has_zero_gradient() {
    let mut params = ParamSet::<f64>::new();
    let id = params.add("ratio", Tensor::new(&[2], vec![1.5, 1.1]).unwrap()).unwrap();
    let mut tape = Tape::<f64>::eval();
    let ratio = tape.param(&params, id).unwrap();
    let adv = tape.constant(Tensor::new(&[2], vec![2.0, 2.0]).unwrap()).unwrap();
    let s1 = tape.mul(ratio, adv).unwrap();
    let c = tape.clamp(ratio, 0.8, 1.2).unwrap();
    let s2 = tape.mul(c, adv).unwrap();
    let s = tape.minimum(s1, s2).unwrap();
    let loss = tape.sum(s).unwrap();
    let g = tape.backward(loss, &params).unwrap();
    // rho = 1.5 > 1 + eps with A > 0: clipped term is active and flat.
    assert_eq!(g.get(id), &[0.0, 2.0]);
}

#[test]
fn unbounded_clip_gives_the_vanilla_policy_gradient() {
    let (model, params, buf) = fixture(6);
    let (mut adv, returns) = buf.advantages(0.99, 0.95);
    normalize_advantages(&mut adv);
    let idx: Vec<usize> = (0..buf.len()).collect();
    let p64 = params.cast::<f64>();
    let model64 = TeacherModel::bind(model.spec.clone(), &p64).unwrap();
    let mb = Minibatch::<f64>::gather(&model64, &buf, &adv, &returns, &idx, &ValueNorm::default()).unwrap();

    let mut tape = Tape::<f64>::eval();
    let terms = ppo_loss(&mut tape, &model64, &p64, &mb, 1e12, 0.0, 0.0).unwrap();
    let ppo = tape.backward(terms.total, &p64).unwrap();

    // -mean(A * log pi(a|s)) has the same gradient when rho = 1.
    let mut tape = Tape::<f64>::eval();
    let o = tape.constant(mb.obs.clone()).unwrap();
    let e = tape.constant(mb.privileged.clone()).unwrap();
    let l = model64.encode(&mut tape, &p64, e).unwrap();
    let out = model64.policy(&mut tape, &p64, o, l).unwrap();
    let lp = tape.gaussian_log_prob(out.mean, out.log_std, &mb.actions).unwrap();
    let a = tape.constant(mb.advantages.clone()).unwrap();
    let weighted = tape.mul(lp, a).unwrap();
    let m = tape.mean(weighted).unwrap();
    let loss = tape.scale(m, -1.0).unwrap();
    let vanilla = tape.backward(loss, &p64).unwrap();

    for (id, name, _) in p64.iter() {
        for (x, y) in ppo.get(id).iter().zip(vanilla.get(id)) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn one_update_lowers_the_loss_and_moves_the_encoder() {
    let (model, mut params, buf) = fixture(7);
    let before = params.clone();
    let cfg = PpoConfig {
        epochs: 1,
        minibatch_size: buf.len(),
        learning_rate: 1e-3,
        ..small_cfg()
    };
    let mut vnorm = ValueNorm::default();
    let (mut adv, returns) = buf.advantages(cfg.gamma, cfg.lambda);
    normalize_advantages(&mut adv);
    let mut probe = vnorm.clone();
    probe.update(&returns);
    let idx: Vec<usize> = (0..buf.len()).collect();
    let loss_of = |p: &ParamSet<f32>| {
        let mb = Minibatch::<f32>::gather(&model, &buf, &adv, &returns, &idx, &probe).unwrap();
        let mut tape = Tape::eval();
        let t = ppo_loss(&mut tape, &model, p, &mb, cfg.clip, cfg.value_coef, cfg.entropy_coef).unwrap();
        tape.value(t.total).item()
    };
    let l0 = loss_of(&params);
    let mut adam = AdamState::new(&params, AdamConfig::default());
    let stats = ppo_update(&model, &mut params, &mut adam, &mut vnorm, &buf, &cfg, cfg.learning_rate, &mut rng(8)).unwrap();
    assert_eq!(vnorm, probe);
    assert!((stats.initial_loss - l0 as f64).abs() < 1e-4);
    let l1 = loss_of(&params);
    assert!(l1 < l0, "loss {l0} -> {l1}");
    assert!(stats.encoder_grad_norm > 0.0);
    let moved: f32 = model
        .encoder
        .layers
        .iter()
        .flat_map(|l| [l.weight, l.bias])
        .map(|id| {
            let a = params.get(id).data();
            let b = before.get(id).data();
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>()
        })
        .sum();
    assert!(moved > 0.0);
}

#[test]
fn kl_blow_up_stops_epochs_early() {
    let (model, mut params, buf) = fixture(9);
    let cfg = PpoConfig {
        epochs: 50,
        minibatch_size: 8,
        learning_rate: 0.05,
        target_kl: 0.01,
        ..small_cfg()
    };
    let mut adam = AdamState::new(&params, AdamConfig::default());
    let stats = ppo_update(&model, &mut params, &mut adam, &mut ValueNorm::default(), &buf, &cfg, cfg.learning_rate, &mut rng(10)).unwrap();
    assert!(stats.early_stopped);
    assert!(stats.epochs_run < 50);
}

#[test]
fn config_validation_rejects_bad_values() {
    assert!(PpoConfig::default().validate().is_ok());
    for bad in [
        PpoConfig { gamma: 0.0, ..PpoConfig::default() },
        PpoConfig { lambda: 1.5, ..PpoConfig::default() },
        PpoConfig { clip: 1.0, ..PpoConfig::default() },
        PpoConfig { learning_rate: 0.0, ..PpoConfig::default() },
        PpoConfig { num_envs: 0, ..PpoConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(PpoError::Config(_))));
    }
    let cfg = PpoConfig::default();
    assert_eq!(cfg.learning_rate_at(0), cfg.learning_rate);
    assert!(cfg.learning_rate_at(750) < cfg.learning_rate);
}

#[test]
fn positive_clipping_keeps_the_fall_penalty() {
    let b = RewardBreakdown {
        tracking: 0.1,
        torque_rate: -3.0,
        fall: -1.0,
        ..RewardBreakdown::default()
    };
    assert_eq!(training_reward(&b, false), b.total());
    assert_eq!(training_reward(&b, true), -1.0);
    let ok = RewardBreakdown {
        tracking: 0.8,
        action: -0.1,
        ..RewardBreakdown::default()
    };
    assert!((training_reward(&ok, true) - 0.7).abs() < 1e-12);
}

#[test]
fn value_norm_tracks_batch_moments() {
    let mut r = rng(11);
    let a: Vec<f32> = (0..300).map(|_| r.gen_range(-4.0..9.0)).collect();
    let mut vn = ValueNorm::default();
    vn.update(&a[..100]);
    vn.update(&a[100..]);
    let n = a.len() as f64;
    let mean = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = a.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!((vn.mean - mean).abs() < 1e-9);
    assert!((vn.var - var).abs() < 1e-9);
    assert!((vn.denormalize(vn.normalize(3.5)) - 3.5).abs() < 1e-5);
}

#[test]
fn training_curve_has_one_row_per_iteration() {
    let cfg = TeacherTraining {
        ppo: PpoConfig {
            iterations: 3,
            ..small_cfg()
        },
        spec: small_spec(),
        terrains: TerrainKind::ALL.to_vec(),
        max_difficulty: 1.0,
        ranges: RangeSet::Training,
        seed: 12,
        workers: 1,
    };
    let mut seen = 0;
    let run = train_teacher(&cfg, &mut |_| seen += 1).unwrap();
    assert_eq!(run.curve.len(), 3);
    assert_eq!(seen, 3);
    assert_eq!(run.checkpoint.kind, ModelKind::Teacher);
    assert_eq!(run.curve[0].csv_line().split(',').count(), CURVE_HEADER.split(',').count());
    let again = train_teacher(&cfg, &mut |_| {}).unwrap();
    assert_eq!(again.checkpoint, run.checkpoint);
    assert_eq!(ACT_DIM, run.checkpoint.spec.teacher.as_ref().unwrap().act_dim);
}
