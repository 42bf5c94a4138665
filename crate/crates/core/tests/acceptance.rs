//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance -- 1 4 11` runs a subset.
//! A failed criterion makes the process exit non-zero only when
//! `TERT_ACCEPTANCE_STRICT=1`; otherwise `cargo test` reports the lines and
//! carries on.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tert_core::distill::{
    collect_student_dataset, collect_teacher_dataset, pretrain_offline, train_variant, DistillConfig, EnvGroup,
    Student, Target, TrajectoryDataset, Variant,
};
use tert_core::eval::{evaluate, EvalConfig, Evaluation, METRIC_HEADER, STEP_HEADER};
use tert_core::io::{csv_bytes, trajectories_from_bytes, trajectories_to_bytes, Dims, TrajectoryFileError};
use tert_core::math::{counter_uniform, grad_check, grad_check_params, MathError, ParamSet, Tape, Tensor, Var};
use tert_core::models::{
    CheckpointError, Metadata, Policy, PolicyCheckpoint, TcnSpec, TeacherModel, TeacherSpec, TransformerModel,
    TransformerSpec, WindowBatch,
};
use tert_core::ppo::{compute_gae, ppo_loss, teacher_checkpoint, train_teacher, Minibatch, PpoConfig, TeacherTraining};
use tert_core::sim::{RangeSet, TerrainKind, TerrainSampler, VecEnv, ACT_DIM, OBS_DIM, PRIV_DIM};

/// Sizes used by the suite. Teachers follow the default PPO schedule on a
/// narrower network; students are smaller than the desk default so that
/// five seeds of each compared variant fit in one CPU session.
mod scale {
    pub const TEACHER_ENVS: usize = 256;
    pub const FLAT_ITERATIONS: usize = 500;
    pub const MULTI_ITERATIONS: usize = 1500;
    pub const TEACHER_HIDDEN: usize = 64;
    pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
    pub const EMBED: usize = 64;
    pub const LAYERS: usize = 2;
    pub const HEADS: usize = 4;
    pub const OFFLINE_TIMESTEPS: usize = 100_000;
    pub const OFFLINE_UPDATES: usize = 3000;
    pub const ONLINE_TIMESTEPS: usize = 20_000;
    pub const ONLINE_UPDATES: usize = 1000;
    pub const ROUNDS: usize = 2;
    pub const GAP_TIMESTEPS: usize = 5000;
    pub const LEARNING_RATE: f64 = 1e-3;
    pub const EVAL_EPISODES: usize = 4;
    pub const EVAL_DIFFICULTIES: [f64; 3] = [0.0, 0.5, 1.0];
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Fallible<T> = Result<T, Box<dyn std::error::Error>>;
type Criterion = fn(&Lab) -> Fallible<Outcome>;

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("TERT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let lab = Lab::default();
    let criteria: [(&str, Criterion); 12] = [
        ("gradient suite", gradient_suite),
        ("attention invariants", attention_invariants),
        ("simulator determinism", simulator_determinism),
        ("GAE oracle", gae_oracle),
        ("teacher competence", teacher_competence),
        ("distillation fidelity", distillation_fidelity),
        ("ablation ordering", ablation_ordering),
        ("sequence-length direction", sequence_length_direction),
        ("online-correction effect", online_correction_effect),
        ("metric oracles", metric_oracles),
        ("persistence", persistence),
        ("end-to-end budget", end_to_end_budget),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&lab)));
        let secs = t0.elapsed().as_secs_f64();
        let o = match result {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => outcome(false, format!("error: {e}")),
            Err(_) => outcome(false, "panicked"),
        };
        failed += usize::from(!o.pass);
        println!("[{}] {n:2}. {name}: {} ({secs:.1} s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 && strict {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Shared artifacts, built on first use.

#[derive(Default)]
struct Lab {
    flat: OnceCell<(PolicyCheckpoint, f64)>,
    multi: OnceCell<(PolicyCheckpoint, f64)>,
    students: OnceCell<Result<Vec<SeedRun>, String>>,
}

struct SeedRun {
    teacher: Evaluation,
    tert: Evaluation,
    no_oc: Evaluation,
    no_op: Evaluation,
    short: Evaluation,
    heldout_initial: f64,
    heldout_final: f64,
    gap_before: f64,
    gap_after: f64,
}

fn teacher_training(terrains: Vec<TerrainKind>, max_difficulty: f64, iterations: usize) -> TeacherTraining {
    let h = scale::TEACHER_HIDDEN;
    TeacherTraining {
        ppo: PpoConfig {
            num_envs: scale::TEACHER_ENVS,
            iterations,
            minibatch_size: scale::TEACHER_ENVS * 24 / 4,
            ..PpoConfig::default()
        },
        spec: TeacherSpec {
            encoder_hidden: vec![h; 2],
            policy_hidden: vec![2 * h, h],
            value_hidden: vec![2 * h, h],
            ..TeacherSpec::default()
        },
        terrains,
        max_difficulty,
        ranges: RangeSet::Training,
        seed: 1,
        workers: 1,
    }
}

impl Lab {
    fn flat_teacher(&self) -> &(PolicyCheckpoint, f64) {
        self.flat.get_or_init(|| {
            let t0 = Instant::now();
            let cfg = teacher_training(vec![TerrainKind::SmoothSlope], 0.0, scale::FLAT_ITERATIONS);
            let run = train_teacher(&cfg, &mut |_| {}).expect("flat teacher trains");
            (run.checkpoint, t0.elapsed().as_secs_f64())
        })
    }

    fn teacher(&self) -> &(PolicyCheckpoint, f64) {
        self.multi.get_or_init(|| {
            let t0 = Instant::now();
            let cfg = teacher_training(TerrainKind::ALL.to_vec(), 1.0, scale::MULTI_ITERATIONS);
            let run = train_teacher(&cfg, &mut |_| {}).expect("multi-terrain teacher trains");
            (run.checkpoint, t0.elapsed().as_secs_f64())
        })
    }

    fn students(&self) -> Fallible<&[SeedRun]> {
        let runs = self.students.get_or_init(|| {
            let teacher = &self.teacher().0;
            scale::SEEDS
                .iter()
                .map(|&s| distill_seed(teacher, s).map_err(|e| format!("seed {s}: {e}")))
                .collect()
        });
        runs.as_deref().map_err(|e| e.clone().into())
    }
}

fn student_spec() -> TransformerSpec {
    TransformerSpec {
        num_layers: scale::LAYERS,
        embed_dim: scale::EMBED,
        num_heads: scale::HEADS,
        ..TransformerSpec::default()
    }
}

fn distill_config() -> DistillConfig {
    DistillConfig {
        offline_updates: scale::OFFLINE_UPDATES,
        online_updates: scale::ONLINE_UPDATES,
        offline_timesteps: scale::OFFLINE_TIMESTEPS,
        online_timesteps: scale::ONLINE_TIMESTEPS,
        correction_rounds: scale::ROUNDS,
        gap_timesteps: scale::GAP_TIMESTEPS,
        learning_rate: scale::LEARNING_RATE,
        ..DistillConfig::default()
    }
}

fn distill_seed(teacher: &PolicyCheckpoint, seed: u64) -> Fallible<SeedRun> {
    let cfg = distill_config();
    let spec = student_spec();
    let mut envs = EnvGroup::training(cfg.num_envs, cfg.max_difficulty, seed)?;
    let (offline, _) = collect_teacher_dataset(teacher, &mut envs, cfg.offline_timesteps)?;
    let eval = EvalConfig {
        difficulties: scale::EVAL_DIFFICULTIES.to_vec(),
        episodes: scale::EVAL_EPISODES,
        seed,
        ..EvalConfig::default()
    };
    let tert = train_variant(Variant::Tert, teacher, &offline, &spec, &cfg, seed)?;
    // The pretrained TERT student is the no-OC variant (same data, seed and budget).
    let no_oc = tert.pretrained.as_ref().ok_or("tert keeps its pretrained student")?;
    let pretrain = tert.pretrain.as_ref().ok_or("tert pretrains")?;
    let correction = tert.correction.as_ref().ok_or("tert corrects")?;
    let no_op = train_variant(Variant::NoOp, teacher, &offline, &spec, &cfg, seed)?;
    let short = pretrained_with_context(teacher, &offline, &spec, &cfg, seed, 1)?;
    Ok(SeedRun {
        teacher: evaluate(teacher, "teacher", &eval)?,
        tert: evaluate(&tert.checkpoint, "tert", &eval)?,
        no_oc: evaluate(no_oc, "no-oc", &eval)?,
        no_op: evaluate(&no_op.checkpoint, "no-op", &eval)?,
        short: evaluate(&short, "tert-T1", &eval)?,
        heldout_initial: pretrain.train.initial_heldout.unwrap_or(f64::NAN),
        heldout_final: pretrain.train.final_heldout.unwrap_or(f64::NAN),
        gap_before: correction.gap_before,
        gap_after: correction.gap_after,
    })
}

fn pretrained_with_context(
    teacher: &PolicyCheckpoint,
    offline: &TrajectoryDataset,
    spec: &TransformerSpec,
    cfg: &DistillConfig,
    seed: u64,
    context: usize,
) -> Fallible<PolicyCheckpoint> {
    let spec = TransformerSpec {
        context_length: context,
        ..spec.clone()
    };
    let cfg = DistillConfig {
        context_length: context,
        ..cfg.clone()
    };
    Ok(train_variant(Variant::NoOc, teacher, offline, &spec, &cfg, seed)?.checkpoint)
}

/// Mean return per terrain kind (every cell holds the same number of episodes).
fn per_terrain(ev: &Evaluation) -> BTreeMap<TerrainKind, f64> {
    let mut sums: BTreeMap<TerrainKind, (f64, usize)> = BTreeMap::new();
    for e in &ev.episodes {
        let s = sums.entry(e.terrain).or_default();
        s.0 += e.episode_return();
        s.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_vec(n: usize, r: &mut impl Rng) -> Vec<f32> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn random_window(batch: usize, len: usize, seed: u64) -> WindowBatch {
    let mut r = rng(seed);
    let mut w = WindowBatch::new(len, OBS_DIM, ACT_DIM);
    for _ in 0..batch {
        let steps: Vec<(Vec<f32>, Vec<f32>)> = (0..len).map(|_| (random_vec(OBS_DIM, &mut r), random_vec(ACT_DIM, &mut r))).collect();
        w.push(steps.iter().map(|(o, a)| (&o[..], &a[..])));
    }
    w
}

fn as_math(e: impl std::fmt::Display) -> MathError {
    MathError::InvalidArgument(e.to_string())
}

// ---------------------------------------------------------------------------
// 1

fn project(t: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var, MathError> {
    let shape = t.value(v).shape().to_vec();
    let w = t.constant(random(&shape, seed ^ 0xABCD))?;
    let p = t.mul(v, w)?;
    t.sum(p)
}

type OpGraph = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var, MathError>>;

fn op_graphs() -> Vec<(&'static str, Vec<usize>, OpGraph)> {
    vec![
        ("add", vec![3, 4], Box::new(|t, x| {
            let c = t.constant(random(&[3, 4], 9))?;
            let y = t.add(x, c)?;
            let y = t.add(y, x)?;
            project(t, y, 1)
        })),
        ("sub", vec![3, 4], Box::new(|t, x| {
            let c = t.constant(random(&[3, 4], 9))?;
            let y = t.sub(c, x)?;
            project(t, y, 2)
        })),
        ("mul", vec![3, 4], Box::new(|t, x| {
            let y = t.mul(x, x)?;
            project(t, y, 3)
        })),
        ("add_row", vec![4], Box::new(|t, x| {
            let c = t.constant(random(&[3, 4], 9))?;
            let y = t.add_row(c, x)?;
            let y = t.mul(y, y)?;
            project(t, y, 4)
        })),
        ("mul_row", vec![3, 4], Box::new(|t, x| {
            let r = t.constant(random(&[4], 8))?;
            let y = t.mul_row(x, r)?;
            project(t, y, 5)
        })),
        ("scale", vec![5], Box::new(|t, x| {
            let y = t.scale(x, -2.5)?;
            project(t, y, 6)
        })),
        ("matmul", vec![3, 4], Box::new(|t, x| {
            let b = t.constant(random(&[4, 2], 9))?;
            let y = t.matmul(x, b, false)?;
            let z = t.matmul(x, x, true)?;
            let a = project(t, y, 7)?;
            let b = project(t, z, 8)?;
            t.add(a, b)
        })),
        ("batch_matmul", vec![2, 3, 4], Box::new(|t, x| {
            let b = t.constant(random(&[2, 4, 3], 9))?;
            let y = t.batch_matmul(x, b, false)?;
            let z = t.batch_matmul(x, x, true)?;
            let a = project(t, y, 10)?;
            let b = project(t, z, 11)?;
            t.add(a, b)
        })),
        ("elu", vec![10], Box::new(|t, x| {
            let y = t.elu(x)?;
            project(t, y, 12)
        })),
        ("exp", vec![6], Box::new(|t, x| {
            let y = t.exp(x)?;
            project(t, y, 13)
        })),
        ("layer_norm", vec![3, 6], Box::new(|t, x| {
            let y = t.layer_norm(x, 1e-5)?;
            project(t, y, 14)
        })),
        ("softmax", vec![3, 5], Box::new(|t, x| {
            let y = t.softmax(x, false)?;
            project(t, y, 15)
        })),
        ("causal_softmax", vec![2, 4, 4], Box::new(|t, x| {
            let y = t.softmax(x, true)?;
            project(t, y, 16)
        })),
        ("dropout_mask", vec![4, 4], Box::new(|t, x| {
            let mask: Vec<f64> = (0..16)
                .map(|i| if counter_uniform(1, 2, 3, i) >= 0.3 { 1.0 / 0.7 } else { 0.0 })
                .collect();
            let m = t.constant(Tensor::new(&[4, 4], mask)?)?;
            let y = t.mul(x, m)?;
            project(t, y, 17)
        })),
        ("gather_rows", vec![4, 3], Box::new(|t, x| {
            let idx = Arc::new(vec![Some(2), None, Some(0), Some(2), Some(3)]);
            let y = t.gather_rows(x, 3, idx)?;
            project(t, y, 18)
        })),
        ("concat_cols", vec![3, 2], Box::new(|t, x| {
            let c = t.constant(random(&[3, 4], 9))?;
            let y = t.concat_cols(c, x)?;
            let y = t.mul(y, y)?;
            project(t, y, 19)
        })),
        ("reshape", vec![2, 6], Box::new(|t, x| {
            let y = t.reshape(x, &[3, 4])?;
            let y = t.mul(y, y)?;
            project(t, y, 20)
        })),
        ("sum_mean", vec![7], Box::new(|t, x| {
            let y = t.mul(x, x)?;
            let s = t.sum(y)?;
            let m = t.mean(x)?;
            let m = t.mul(m, m)?;
            t.add(s, m)
        })),
        ("mse", vec![4, 3], Box::new(|t, x| {
            let target = random(&[4, 3], 21);
            let a = t.mse(x, &target, None)?;
            let b = t.mse(x, &target, Some(&[1.0, 0.0, 2.0, 0.5]))?;
            t.add(a, b)
        })),
        ("gaussian_log_prob", vec![3, 2], Box::new(|t, x| {
            let ls = t.constant(Tensor::new(&[2], vec![-0.3, 0.2])?)?;
            let lp = t.gaussian_log_prob(x, ls, &random(&[3, 2], 22))?;
            project(t, lp, 23)
        })),
        ("gaussian_log_std", vec![2], Box::new(|t, x| {
            let m = t.constant(random(&[3, 2], 24))?;
            let lp = t.gaussian_log_prob(m, x, &random(&[3, 2], 25))?;
            project(t, lp, 26)
        })),
        ("clamp", vec![8], Box::new(|t, x| {
            let y = t.clamp(x, -0.5, 0.5)?;
            project(t, y, 27)
        })),
        ("minimum", vec![8], Box::new(|t, x| {
            let c = t.constant(random(&[8], 28))?;
            let y = t.minimum(x, c)?;
            project(t, y, 29)
        })),
    ]
}

fn teacher_loss_error() -> Fallible<f64> {
    let spec = TeacherSpec {
        encoder_hidden: vec![6, 5],
        policy_hidden: vec![8, 5],
        value_hidden: vec![6],
        init_log_std: -0.5,
        ..TeacherSpec::default()
    };
    let mut p32 = ParamSet::new();
    TeacherModel::init(spec.clone(), &mut p32, &mut rng(30))?;
    let params = p32.cast::<f64>();
    let model = TeacherModel::bind(spec, &params)?;
    let mut r = rng(31);
    let n = 6;
    let obs: Vec<Vec<f32>> = (0..n).map(|_| random_vec(OBS_DIM, &mut r)).collect();
    let privileged: Vec<Vec<f32>> = (0..n).map(|_| random_vec(PRIV_DIM, &mut r)).collect();
    let o: Vec<&[f32]> = obs.iter().map(|v| &v[..]).collect();
    let e: Vec<&[f32]> = privileged.iter().map(|v| &v[..]).collect();
    let obs_t = model.obs_tensor::<f64>(&o)?;
    let priv_t = model.privileged_tensor::<f64>(&e)?;
    let actions = Tensor::new(&[n, ACT_DIM], (0..n * ACT_DIM).map(|_| r.gen_range(-0.6..0.6)).collect())?;
    // Behaviour log-probs near the current ones so some ratios sit inside the
    // clip range and some outside.
    let mut tape = Tape::<f64>::eval();
    let ov = tape.constant(obs_t.clone())?;
    let ev = tape.constant(priv_t.clone())?;
    let l = model.encode(&mut tape, &params, ev)?;
    let out = model.policy(&mut tape, &params, ov, l)?;
    let lp = tape.gaussian_log_prob(out.mean, out.log_std, &actions)?;
    let old: Vec<f64> = tape.value(lp).data().iter().map(|v| v + r.gen_range(-0.5..0.5)).collect();
    let mb = Minibatch {
        obs: obs_t,
        privileged: priv_t,
        actions,
        old_log_probs: Tensor::new(&[n], old)?,
        advantages: Tensor::new(&[n], (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?,
        returns: Tensor::new(&[n, 1], (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?,
    };
    let err = grad_check_params(|t, p| Ok(ppo_loss(t, &model, p, &mb, 0.2, 1.0, 0.005)?.total), &params, 1e-5)?;
    Ok(err)
}

fn transformer_loss_error() -> Fallible<f64> {
    let spec = TransformerSpec {
        num_layers: 2,
        embed_dim: 8,
        num_heads: 2,
        dropout_rate: 0.0,
        context_length: 4,
        ..TransformerSpec::default()
    };
    let mut p32 = ParamSet::new();
    TransformerModel::init(spec.clone(), &mut p32, &mut rng(40))?;
    let params = p32.cast::<f64>();
    let model = TransformerModel::bind(spec, &params)?;
    let w = random_window(2, 4, 41);
    let target = random(&[8, ACT_DIM], 42);
    let err = grad_check_params(
        |tape, p| {
            let out = model.forward(tape, p, &w, false).map_err(as_math)?;
            tape.mse(out.predictions, &target, None)
        },
        &params,
        1e-5,
    )?;
    Ok(err)
}

fn gradient_suite(_: &Lab) -> Fallible<Outcome> {
    let tol = 1e-4;
    let mut worst = ("", 0.0f64);
    let mut failures = Vec::new();
    let graphs = op_graphs();
    for (i, (name, shape, f)) in graphs.iter().enumerate() {
        let x = random(shape, 100 + i as u64);
        let err = grad_check(|t, x| f(t, x), &x, 1e-5)?;
        if err > worst.1 {
            worst = (name, err);
        }
        if err > tol {
            failures.push(format!("{name} {err:.1e}"));
        }
    }
    let teacher = teacher_loss_error()?;
    let transformer = transformer_loss_error()?;
    for (name, err) in [("teacher loss", teacher), ("transformer loss", transformer)] {
        if err > tol {
            failures.push(format!("{name} {err:.1e}"));
        }
    }
    Ok(outcome(
        failures.is_empty(),
        format!(
            "{} op kinds, worst {} {:.1e}; teacher loss {teacher:.1e}; transformer loss {transformer:.1e} (tol {tol:.0e}){}",
            graphs.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; over tol: {}", failures.join(", ")) }
        ),
    ))
}

// ---------------------------------------------------------------------------
// 2

fn attention_invariants(_: &Lab) -> Fallible<Outcome> {
    let spec = TransformerSpec {
        num_layers: 2,
        embed_dim: 16,
        num_heads: 4,
        context_length: 20,
        ..TransformerSpec::default()
    };
    let mut params = ParamSet::new();
    let model = TransformerModel::init(spec, &mut params, &mut rng(50))?;
    let predict = |w: &WindowBatch| -> Fallible<Vec<f32>> {
        let mut tape = Tape::eval();
        let out = model.forward(&mut tape, &params, w, false)?;
        Ok(tape.value(out.predictions).to_vec())
    };
    let base_w = random_window(1, 20, 51);
    let base = predict(&base_w)?;
    let mut exact = true;
    let mut r = rng(52);
    for _ in 0..10 {
        let k = r.gen_range(0..20);
        let mut obs = base_w.clone();
        for v in &mut obs.obs[k * OBS_DIM..(k + 1) * OBS_DIM] {
            *v += r.gen_range(0.1..1.0);
        }
        let p = predict(&obs)?;
        exact &= p[..k * ACT_DIM] == base[..k * ACT_DIM] && p[k * ACT_DIM..(k + 1) * ACT_DIM] != base[k * ACT_DIM..(k + 1) * ACT_DIM];
        let mut act = base_w.clone();
        for v in &mut act.actions[k * ACT_DIM..(k + 1) * ACT_DIM] {
            *v -= r.gen_range(0.1..1.0);
        }
        let p = predict(&act)?;
        exact &= p[..(k + 1) * ACT_DIM] == base[..(k + 1) * ACT_DIM];
    }
    let w = random_window(3, 20, 53);
    let mut tape = Tape::eval();
    let trace = model.forward(&mut tape, &params, &w, true)?.trace.ok_or("no trace")?;
    let mut worst = 0.0f32;
    let mut leak = false;
    for layer in 0..trace.layers.len() {
        for b in 0..3 {
            for h in 0..trace.heads {
                for q in 0..trace.tokens {
                    let row = trace.row(layer, b, h, q);
                    worst = worst.max((row.iter().sum::<f32>() - 1.0).abs());
                    leak |= row[q + 1..].iter().any(|&v| v != 0.0);
                }
            }
        }
    }
    Ok(outcome(
        exact && !leak && worst <= 1e-5,
        format!(
            "perturbation test {}; future weights {}; worst row-sum error {worst:.1e} (tol 1e-5)",
            if exact { "exact" } else { "NOT exact" },
            if leak { "non-zero" } else { "all zero" }
        ),
    ))
}

// ---------------------------------------------------------------------------
// 3

fn simulator_determinism(_: &Lab) -> Fallible<Outcome> {
    let mut r = rng(60);
    let mut identical = 0;
    let mut steps = 0;
    for _ in 0..10 {
        let kind = TerrainKind::ALL[r.gen_range(0..5)];
        let difficulty: f64 = r.gen_range(0.0..1.0);
        let seed: u64 = r.gen();
        let n_envs = 6;
        let actions: Vec<Vec<[f32; ACT_DIM]>> = (0..300)
            .map(|_| (0..n_envs).map(|_| std::array::from_fn(|_| r.gen_range(-1.0..1.0))).collect())
            .collect();
        let replay = |workers: usize| -> Fallible<Vec<u64>> {
            let sampler = TerrainSampler {
                kinds: vec![kind],
                max_difficulty: difficulty,
                fixed: Some(difficulty),
            };
            let mut env = VecEnv::new(n_envs, seed, sampler, RangeSet::Training)?.with_workers(workers);
            let mut trace = Vec::new();
            for a in &actions {
                for s in env.step(a).map_err(|(i, e)| format!("env {i}: {e}"))? {
                    trace.extend(s.result.obs.0.iter().map(|v| v.to_bits() as u64));
                    trace.extend(s.result.privileged.0.iter().map(|v| v.to_bits() as u64));
                    trace.push(s.result.reward.to_bits());
                    trace.extend(s.result.torques.iter().map(|v| v.to_bits()));
                    trace.push(s.result.done as u64);
                }
            }
            Ok(trace)
        };
        let a = replay(1)?;
        let b = replay(4)?;
        steps += actions.len() * n_envs;
        identical += usize::from(a == b);
    }
    Ok(outcome(
        identical == 10,
        format!("{identical}/10 triples bit-identical across 1 and 4 workers ({steps} env steps each run)"),
    ))
}

// ---------------------------------------------------------------------------
// 4

fn gae_brute_force(r: &[f32], v: &[f32], d: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    // A_t = sum_l (gamma lambda)^l delta_{t+l}, truncated at the first done.
    let n = r.len();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut w = 1.0;
            for k in t..n {
                let next = if d[k] { 0.0 } else { v[k + 1] as f64 };
                let delta = r[k] as f64 + gamma * next - v[k] as f64;
                total += w * delta;
                if d[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            total
        })
        .collect()
}

fn gae_oracle(_: &Lab) -> Fallible<Outcome> {
    let mut r = rng(70);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.gen_range(1..64);
        let rewards: Vec<f32> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let values: Vec<f32> = (0..=n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| r.gen_bool(0.1)).collect();
        let gamma = r.gen_range(0.8..1.0);
        let lambda = r.gen_range(0.5..1.0);
        let (adv, ret) = compute_gae(&rewards, &values, &dones, gamma, lambda);
        let oracle = gae_brute_force(&rewards, &values, &dones, gamma, lambda);
        for t in 0..n {
            worst = worst.max((adv[t] as f64 - oracle[t]).abs());
            worst = worst.max((ret[t] as f64 - (oracle[t] + values[t] as f64)).abs());
        }
    }
    Ok(outcome(worst <= 1e-6, format!("100 instances, worst deviation {worst:.1e} (tol 1e-6)")))
}

// ---------------------------------------------------------------------------
// 5

fn flat_tracking(ckpt: &PolicyCheckpoint) -> Fallible<(f64, usize)> {
    let policy = Policy::from_checkpoint(ckpt)?;
    let n = 16;
    let mut envs = VecEnv::new(n, 99, TerrainSampler::flat(), RangeSet::Training)?;
    let mut memory = vec![policy.new_memory(); n];
    let (mut track, mut falls, mut count) = (0.0, 0, 0usize);
    for _ in 0..1000 {
        let step = policy.act(&mut memory, &envs.observations(), Some(&envs.privileged()))?;
        for s in envs.step(&step.actions).map_err(|(i, e)| format!("env {i}: {e}"))? {
            track += s.result.breakdown.tracking;
            falls += usize::from(s.result.fell);
            count += 1;
        }
    }
    Ok((track / count as f64, falls))
}

fn teacher_competence(lab: &Lab) -> Fallible<Outcome> {
    let (flat, flat_secs) = lab.flat_teacher();
    let (tracking, falls) = flat_tracking(flat)?;
    let (multi, multi_secs) = lab.teacher();
    let eval = EvalConfig {
        kinds: vec![TerrainKind::SmoothSlope],
        difficulties: vec![0.0, 0.25, 0.5],
        episodes: 10,
        ..EvalConfig::default()
    };
    let success = evaluate(multi, "teacher", &eval)?.success_rate();
    let minutes = (flat_secs + multi_secs) / 60.0;
    Ok(outcome(
        tracking >= 0.8 && success >= 0.8 && minutes <= 60.0,
        format!(
            "flat tracking {tracking:.3} of 1.0 after {} iterations ({falls} falls; need >= 0.8); smooth-slope success at d <= 0.5: {success:.2} (need >= 0.8); training time {minutes:.1} min (need <= 60)",
            scale::FLAT_ITERATIONS
        ),
    ))
}

// ---------------------------------------------------------------------------
// 6-9

fn distillation_fidelity(lab: &Lab) -> Fallible<Outcome> {
    let runs = lab.students()?;
    let teacher = mean(runs.iter().map(|r| r.teacher.mean_return()));
    let tert = mean(runs.iter().map(|r| r.tert.mean_return()));
    if teacher <= 0.0 {
        return Ok(outcome(false, format!("teacher mean return {teacher:.2} is not positive; ratio undefined")));
    }
    let ratio = tert / teacher;
    Ok(outcome(
        ratio >= 0.9,
        format!(
            "TERT {tert:.2} vs teacher {teacher:.2} mean return over {} seeds: {:.1}% (need >= 90%)",
            runs.len(),
            100.0 * ratio
        ),
    ))
}

/// Per terrain and seed, returns are mapped to [0, 1] by the lowest and
/// highest return among the teacher and the compared variants.
fn normalized(runs: &[SeedRun]) -> (f64, f64, f64) {
    let (mut tert, mut no_oc, mut no_op) = (Vec::new(), Vec::new(), Vec::new());
    for r in runs {
        let sets = [per_terrain(&r.teacher), per_terrain(&r.tert), per_terrain(&r.no_oc), per_terrain(&r.no_op)];
        for kind in sets[0].keys() {
            let v: Vec<f64> = sets.iter().map(|s| s[kind]).collect();
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let norm = |x: f64| if hi > lo { (x - lo) / (hi - lo) } else { 1.0 };
            tert.push(norm(v[1]));
            no_oc.push(norm(v[2]));
            no_op.push(norm(v[3]));
        }
    }
    (mean(tert), mean(no_oc), mean(no_op))
}

fn ablation_ordering(lab: &Lab) -> Fallible<Outcome> {
    let runs = lab.students()?;
    let (tert, no_oc, no_op) = normalized(runs);
    let improvement = runs
        .iter()
        .map(|r| r.heldout_initial / r.heldout_final)
        .fold(f64::INFINITY, f64::min);
    Ok(outcome(
        tert >= no_oc && tert >= no_op && improvement >= 10.0,
        format!(
            "normalized return TERT {tert:.3}, w/o-OC {no_oc:.3}, w/o-OP {no_op:.3}; held-out MSE improvement over init, worst seed {improvement:.1}x (need >= 10x)"
        ),
    ))
}

fn sequence_length_direction(lab: &Lab) -> Fallible<Outcome> {
    let runs = lab.students()?;
    let long = mean(runs.iter().map(|r| r.no_oc.mean_return()));
    let short = mean(runs.iter().map(|r| r.short.mean_return()));
    let wins = runs.iter().filter(|r| r.no_oc.mean_return() >= r.short.mean_return()).count();
    Ok(outcome(
        long >= short,
        format!(
            "pretrained return T=20 {long:.2} vs T=1 {short:.2} over {} seeds (T=20 ahead on {wins})",
            runs.len()
        ),
    ))
}

fn online_correction_effect(lab: &Lab) -> Fallible<Outcome> {
    let runs = lab.students()?;
    let before = mean(runs.iter().map(|r| r.gap_before));
    let after = mean(runs.iter().map(|r| r.gap_after));
    let fewer = runs.iter().filter(|r| r.gap_after < r.gap_before).count();
    Ok(outcome(
        after < before,
        format!(
            "on-policy action gap {before:.4} before, {after:.4} after correction over {} seeds (lower on {fewer})",
            runs.len()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 10

fn small_teacher(seed: u64) -> Fallible<PolicyCheckpoint> {
    let spec = TeacherSpec {
        encoder_hidden: vec![16],
        policy_hidden: vec![16],
        value_hidden: vec![16],
        init_log_std: -1.0,
        ..TeacherSpec::default()
    };
    let mut params = ParamSet::new();
    TeacherModel::init(spec.clone(), &mut params, &mut rng(seed))?;
    Ok(teacher_checkpoint(
        &spec,
        &params,
        Metadata {
            seed,
            stage: "teacher".into(),
            iteration: 0,
        },
    ))
}

#[derive(Default)]
struct Cell {
    returns: Vec<f64>,
    smooth: Vec<f64>,
    energy: Vec<f64>,
    fell: Vec<bool>,
}

/// Recomputes the metric table from a per-step CSV export.
fn metrics_from_steps(text: &[u8]) -> Fallible<BTreeMap<(String, String), Cell>> {
    struct Ep {
        actions: Vec<[f64; 4]>,
        power: Vec<f64>,
        rewards: Vec<f64>,
        fell: bool,
    }
    let mut reader = csv::Reader::from_reader(text);
    let mut episodes: BTreeMap<(String, String, usize), Ep> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let f = |i: usize| -> Fallible<f64> { Ok(rec[i].parse::<f64>()?) };
        let key = (rec[0].to_string(), rec[1].to_string(), rec[2].parse::<usize>()?);
        let ep = episodes.entry(key).or_insert(Ep {
            actions: Vec::new(),
            power: Vec::new(),
            rewards: Vec::new(),
            fell: false,
        });
        ep.actions.push([f(4)?, f(5)?, f(6)?, f(7)?]);
        let mut p = 0.0;
        for j in 0..4 {
            p += (f(8 + j)? * f(12 + j)?).abs();
        }
        ep.power.push(p);
        ep.rewards.push(f(16)?);
        ep.fell = &rec[17] == "true";
    }
    let mut cells: BTreeMap<(String, String), Cell> = BTreeMap::new();
    for ((terrain, difficulty, _), ep) in episodes {
        let cell = cells.entry((terrain, difficulty)).or_default();
        cell.returns.push(ep.rewards.iter().sum());
        let n = ep.actions.len();
        let mut s = 0.0;
        for t in 1..n {
            let d: f64 = (0..4).map(|j| (ep.actions[t][j] - ep.actions[t - 1][j]).powi(2)).sum();
            s += d.sqrt();
        }
        cell.smooth.push(if n > 1 { s / (n - 1) as f64 } else { 0.0 });
        cell.energy.push(ep.power.iter().sum::<f64>() / n as f64);
        cell.fell.push(ep.fell);
    }
    Ok(cells)
}

fn population(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

fn metric_oracles(_: &Lab) -> Fallible<Outcome> {
    let ckpt = small_teacher(80)?;
    let cfg = EvalConfig {
        kinds: vec![TerrainKind::RoughSlope, TerrainKind::StairsDown],
        difficulties: vec![0.2, 0.9],
        episodes: 3,
        max_steps: 300,
        ..EvalConfig::default()
    };
    let ev = evaluate(&ckpt, "probe", &cfg)?;
    let steps: Vec<Vec<String>> = ev.indexed_episodes().iter().flat_map(|(n, e)| e.step_rows(*n)).collect();
    let steps_csv = csv_bytes(&STEP_HEADER, steps)?;
    let metrics_csv = csv_bytes(&METRIC_HEADER, ev.rows.iter().map(|r| r.fields()).collect::<Vec<_>>())?;

    let cells = metrics_from_steps(&steps_csv)?;
    let mut reader = csv::Reader::from_reader(metrics_csv.as_slice());
    let mut worst = 0.0f64;
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec?;
        let cell = cells.get(&(rec[1].to_string(), rec[2].to_string())).ok_or("metric row without episodes")?;
        let (rm, rs) = population(&cell.returns);
        let (sm, ss) = population(&cell.smooth);
        let (em, es) = population(&cell.energy);
        let success = cell.fell.iter().filter(|f| !**f).count() as f64 / cell.fell.len() as f64;
        for (i, want) in [(4, rm), (5, rs), (6, sm), (7, ss), (8, em), (9, es), (10, success)] {
            let got: f64 = rec[i].parse()?;
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
        rows += 1;
    }

    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../python/metric_oracle.py");
    let dir = tempfile::tempdir()?;
    std::fs::write(dir.path().join("steps.csv"), &steps_csv)?;
    std::fs::write(dir.path().join("metrics.csv"), &metrics_csv)?;
    let python = std::process::Command::new("python3")
        .arg(&script)
        .arg(dir.path().join("steps.csv"))
        .arg(dir.path().join("metrics.csv"))
        .output();
    let (python_ok, python_note) = match python {
        Ok(out) if out.status.success() => (true, String::from_utf8_lossy(&out.stdout).trim().to_string()),
        Ok(out) => (false, format!("python oracle failed: {}", String::from_utf8_lossy(&out.stdout).trim())),
        Err(_) => (true, "python3 unavailable, script skipped".to_string()),
    };
    Ok(outcome(
        rows == 4 && worst <= 1e-6 && python_ok,
        format!("{rows} metric rows recomputed from the step export, worst relative deviation {worst:.1e} (tol 1e-6); {python_note}"),
    ))
}

// ---------------------------------------------------------------------------
// 11

/// Files store tensors sorted by name, so parameters are compared by name.
fn same_checkpoint(a: &PolicyCheckpoint, b: &PolicyCheckpoint) -> bool {
    a.kind == b.kind
        && a.spec == b.spec
        && a.metadata == b.metadata
        && a.params.len() == b.params.len()
        && a.params.iter().all(|(_, name, t)| b.params.id(name).is_some_and(|id| b.params.get(id) == t))
}

fn persistence(_: &Lab) -> Fallible<Outcome> {
    let teacher = small_teacher(90)?;
    let mut envs = EnvGroup::training(10, 1.0, 91)?;
    let (data, _) = collect_teacher_dataset(&teacher, &mut envs, 600)?;
    let mut notes = Vec::new();
    let mut ok = true;

    let bytes = trajectories_to_bytes(&data)?;
    let back = trajectories_from_bytes(&bytes, Dims::default())?;
    let exact = trajectories_to_bytes(&back)? == bytes;
    ok &= exact;
    notes.push(format!("trajectories {} bytes round trip {}", bytes.len(), if exact { "exact" } else { "differs" }));
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x04;
    let mut wrong_version = bytes.clone();
    wrong_version[4] ^= 0x10;
    let cases = [
        ("flip", matches!(trajectories_from_bytes(&flipped, Dims::default()), Err(TrajectoryFileError::Checksum { .. }))),
        ("truncate", matches!(trajectories_from_bytes(&bytes[..bytes.len() - 3], Dims::default()), Err(TrajectoryFileError::Truncated))),
        ("magic", matches!(trajectories_from_bytes(&[b"XERT", &bytes[4..]].concat(), Dims::default()), Err(TrajectoryFileError::BadMagic))),
        ("dims", {
            let other = Dims { obs: 20, ..Dims::default() };
            matches!(trajectories_from_bytes(&bytes, other), Err(TrajectoryFileError::Dimension { .. }))
        }),
        ("version", matches!(trajectories_from_bytes(&wrong_version, Dims::default()), Err(TrajectoryFileError::Version { .. }))),
    ];
    let rejected: Vec<&str> = cases.iter().filter(|c| c.1).map(|c| c.0).collect();
    ok &= rejected.len() == cases.len();
    notes.push(format!("trajectory corruptions rejected: {}", rejected.join("/")));

    let student = Student::tcn(TcnSpec::default(), Target::Latent, &mut rng(92))?;
    let mut ckpts = vec![teacher.clone()];
    ckpts.push(student.checkpoint(&teacher, Metadata { seed: 92, stage: "probe".into(), iteration: 0 })?);
    let tf = Student::transformer(student_spec(), Target::Action, &mut rng(93))?;
    ckpts.push(tf.checkpoint(&teacher, Metadata { seed: 93, stage: "probe".into(), iteration: 0 })?);
    let mut ck_ok = 0;
    for c in &ckpts {
        let b = c.to_bytes()?;
        let again = PolicyCheckpoint::from_bytes(&b)?;
        let mut flip = b.clone();
        let n = flip.len();
        flip[n - 9] ^= 0x20;
        let checks = [
            again.to_bytes()? == b,
            same_checkpoint(&again, c),
            matches!(PolicyCheckpoint::from_bytes(&flip), Err(CheckpointError::Checksum { .. })),
            matches!(PolicyCheckpoint::from_bytes(&b[..n - 2]), Err(CheckpointError::Truncated)),
            matches!(PolicyCheckpoint::from_bytes(&[b"XXXX", &b[4..]].concat()), Err(CheckpointError::BadMagic)),
        ];
        let good = checks.iter().all(|c| *c);
        ck_ok += usize::from(good);
    }
    ok &= ck_ok == ckpts.len();
    notes.push(format!("{ck_ok}/{} checkpoint kinds round trip exactly and reject corruption", ckpts.len()));
    Ok(outcome(ok, notes.join("; ")))
}

// ---------------------------------------------------------------------------
// 12

fn per_unit(secs: f64, units: usize) -> f64 {
    secs / units.max(1) as f64
}

fn timed<T>(f: impl FnOnce() -> Fallible<T>) -> Fallible<(T, f64)> {
    let t0 = Instant::now();
    let v = f()?;
    Ok((v, t0.elapsed().as_secs_f64()))
}

fn end_to_end_budget(_: &Lab) -> Fallible<Outcome> {
    let ppo = PpoConfig::default();
    let distill = DistillConfig::default();
    let tspec = TransformerSpec::default();

    // Teacher: a few PPO iterations at the desk default size.
    let probe_iters = 2;
    let cfg = TeacherTraining {
        ppo: PpoConfig {
            iterations: probe_iters,
            ..ppo.clone()
        },
        spec: TeacherSpec::default(),
        terrains: TerrainKind::ALL.to_vec(),
        max_difficulty: 1.0,
        ranges: RangeSet::Training,
        seed: 0,
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let (run, secs) = timed(|| Ok(train_teacher(&cfg, &mut |_| {})?))?;
    let t_ppo = per_unit(secs, probe_iters);
    let teacher = run.checkpoint;

    let mut envs = EnvGroup::training(distill.num_envs, 1.0, 0)?;
    let ((offline, _), secs) = timed(|| Ok(collect_teacher_dataset(&teacher, &mut envs, 2000)?))?;
    let t_teacher_step = per_unit(secs, 2000);

    let probe_updates = 3;
    let small = DistillConfig {
        offline_updates: probe_updates,
        eval_windows: 1,
        eval_every: 1_000_000,
        ..distill.clone()
    };
    let student = Student::transformer(tspec.clone(), Target::Action, &mut rng(0))?;
    let ((trainer, _), secs) = timed(|| Ok(pretrain_offline(&offline, student, &small, 0)?))?;
    let t_update = per_unit(secs, probe_updates);
    let meta = Metadata {
        seed: 0,
        stage: "probe".into(),
        iteration: 0,
    };
    let policy = Policy::from_checkpoint(&trainer.student.checkpoint(&teacher, meta.clone())?)?;
    let mut envs = EnvGroup::training(distill.num_envs, 1.0, 1)?;
    let (_, secs) = timed(|| Ok(collect_student_dataset(&policy, &teacher, &mut envs, 1000)?))?;
    let t_student_step = per_unit(secs, 1000);

    let tcn_spec = TcnSpec {
        output_dim: ACT_DIM,
        ..distill.tcn.clone()
    };
    let tcn = Student::tcn(tcn_spec, Target::Action, &mut rng(0))?;
    let ((tcn_trainer, _), secs) = timed(|| Ok(pretrain_offline(&offline, tcn, &small, 0)?))?;
    let t_tcn_update = per_unit(secs, probe_updates);
    let tcn_policy = Policy::from_checkpoint(&tcn_trainer.student.checkpoint(&teacher, meta)?)?;
    let mut envs = EnvGroup::training(distill.num_envs, 1.0, 2)?;
    let (_, secs) = timed(|| Ok(collect_student_dataset(&tcn_policy, &teacher, &mut envs, 1000)?))?;
    let t_tcn_step = per_unit(secs, 1000);

    let rounds = distill.correction_rounds as f64;
    let online = distill.online_timesteps as f64;
    let gaps = 2.0 * distill.gap_timesteps as f64;
    let eval_steps = (EvalConfig::default().episodes * 5 * 5) as f64 * 1000.0;
    let pretrain = distill.offline_updates as f64 * t_update;
    let correct = rounds * (online * t_student_step + distill.online_updates as f64 * t_update) + gaps * t_student_step;
    let tcn_pretrain = distill.offline_updates as f64 * t_tcn_update;
    let tcn_correct = rounds * (online * t_tcn_step + distill.online_updates as f64 * t_tcn_update) + gaps * t_tcn_step;
    let stages = [
        ("teacher", ppo.iterations as f64 * t_ppo),
        ("collect", distill.offline_timesteps as f64 * t_teacher_step),
        ("pretrain", pretrain),
        ("correct", correct),
        ("eval", eval_steps * (t_teacher_step + 4.0 * t_student_step + 2.0 * t_tcn_step)),
        // no-OC, no-OP, latent Transformer, TCN student, RMA baseline
        ("ablations", pretrain + correct + (pretrain + correct) + (tcn_pretrain + tcn_correct) + tcn_correct),
    ];
    let total: f64 = stages.iter().map(|s| s.1).sum();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()) as f64;
    let projected = total * cores / 8.0;
    let breakdown: Vec<String> = stages.iter().map(|(n, s)| format!("{n} {:.1} h", s / 3600.0)).collect();
    Ok(outcome(
        projected <= 4.0 * 3600.0,
        format!(
            "projected {:.1} h on 8 cores (linear scaling from {:.1} h measured throughput on {cores} core(s): {}); need <= 4 h",
            projected / 3600.0,
            total / 3600.0,
            breakdown.join(", ")
        ),
    ))
}
