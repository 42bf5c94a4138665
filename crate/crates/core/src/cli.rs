//! The `tert` command line.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::distill::{
    collect_student_dataset, collect_teacher_dataset, correct_online, train_tcn_student, train_variant,
    CorrectionReport, DistillError, EnvGroup, PretrainReport, Student, Trainer, TrajectoryDataset, Variant,
};
use crate::eval::{
    dump_attention, dump_hidden, energy, evaluate, sequence_length_sweep, smoothness, EvalError, METRIC_HEADER,
    STEP_HEADER, SWEEP_HEADER,
};
use crate::io::{read_trajectories, write_csv, write_trajectories, ConfigError, Dims, ExperimentConfig, Manifest};
use crate::models::{load_checkpoint, save_checkpoint, Metadata, Policy, PolicyCheckpoint};
use crate::ppo::{train_teacher, PpoError};
use crate::sim::{RangeSet, Terrain, TerrainKind, TerrainSpec};

pub const CHECKPOINT_FILE: &str = "checkpoint.tckp";
pub const CURVE_FILE: &str = "curve.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAJECTORY_FILE: &str = "trajectories.tert";

#[derive(Debug, Parser)]
#[command(name = "tert", version, about = "Teacher training, Transformer distillation and evaluation on the planar quadruped")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Bit-reproducible mode (also enabled by TERT_DETERMINISTIC=1).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the privileged teacher with PPO.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Roll out the teacher (or a student labelled by the teacher) and save trajectories.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        teacher: PathBuf,
        /// Drive the environments with this student instead of the teacher.
        #[arg(long, value_name = "PATH")]
        student: Option<PathBuf>,
        /// Timesteps to record; defaults to the offline budget.
        #[arg(long, value_name = "N")]
        timesteps: Option<usize>,
    },
    /// Offline pretraining of the Transformer on teacher trajectories.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        teacher: PathBuf,
        /// Teacher trajectories; collected in-process when omitted.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Online correction of a pretrained Transformer.
    Correct {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        teacher: PathBuf,
        /// Pretrained student checkpoint.
        #[arg(long, value_name = "PATH")]
        student: PathBuf,
        /// Trajectories that seed the aggregate (usually the offline data).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Train the TCN latent-estimator baseline.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        teacher: PathBuf,
    },
    /// Evaluate a policy over a terrain and difficulty grid.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Terrain kinds to evaluate; defaults to the configured set.
        #[arg(long = "terrain", value_name = "KIND")]
        terrains: Vec<TerrainKind>,
        /// Policy label written to the metrics file.
        #[arg(long, value_name = "NAME")]
        policy_id: Option<String>,
    },
    /// Dump attention weights of a Transformer policy.
    Attn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "KIND")]
        terrain: TerrainKind,
        #[arg(long, value_name = "D", default_value_t = 0.5)]
        difficulty: f64,
        #[arg(long, value_name = "N", default_value_t = 200)]
        steps: usize,
    },
    /// Dump last-hidden-layer activations labelled by terrain.
    Hidden {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long = "terrain", value_name = "KIND")]
        terrains: Vec<TerrainKind>,
        #[arg(long, value_name = "D", default_value_t = 0.5)]
        difficulty: f64,
        #[arg(long, value_name = "N", default_value_t = 200)]
        steps: usize,
    },
    /// Pretrain at several context lengths and evaluate each.
    SweepSeqlen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        teacher: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "T,...", value_delimiter = ',', default_value = "1,5,10,20")]
        lengths: Vec<usize>,
    },
    /// Train one student variant end to end.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "KIND")]
        variant: Variant,
        #[arg(long, value_name = "PATH")]
        teacher: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Write the height profile of a terrain on a 1 cm grid.
    ExportTerrain {
        #[arg(long, value_name = "KIND")]
        terrain: TerrainKind,
        #[arg(long, value_name = "D", default_value_t = 0.5)]
        difficulty: f64,
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Config(_) => CliError::Config(e.to_string()),
            e => runtime(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) | EvalError::WrongKind(_) => CliError::Config(e.to_string()),
            EvalError::Distill(d) => d.into(),
            e => runtime(e),
        }
    }
}

impl From<PpoError> for CliError {
    fn from(e: PpoError) -> Self {
        match e {
            PpoError::Config(_) => CliError::Config(e.to_string()),
            e => runtime(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        runtime(e)
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 for usage or configuration errors,
/// 1 when the run itself fails.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn env_deterministic() -> bool {
    std::env::var("TERT_DETERMINISTIC").is_ok_and(|v| v == "1")
}

/// Resolved configuration plus the run's manifest and output directory.
struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
    started: Instant,
}

impl Run {
    fn start(command: &str, common: &Common) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        cfg.output_dir = out.clone();
        let deterministic = common.deterministic || env_deterministic();
        std::fs::create_dir_all(&out)?;
        let mut manifest = Manifest::new(command, &cfg.canonical_json(), cfg.seed, deterministic);
        manifest.add_input(&common.config)?;
        log::info!("{command}: seed {} -> {}", cfg.seed, out.display());
        Ok(Self {
            cfg,
            out,
            manifest,
            started: Instant::now(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.manifest.add_input(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
    }

    fn checkpoint(&mut self, path: &Path) -> Result<PolicyCheckpoint, CliError> {
        let ckpt = load_checkpoint(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        self.input(path)?;
        Ok(ckpt)
    }

    fn save_checkpoint(&mut self, ckpt: &PolicyCheckpoint) -> Result<(), CliError> {
        save_checkpoint(ckpt, &self.out.join(CHECKPOINT_FILE)).map_err(runtime)?;
        self.manifest.add_output(&self.out, CHECKPOINT_FILE)?;
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: Vec<Vec<String>>) -> Result<(), CliError> {
        write_csv(&self.out.join(name), header, rows)?;
        self.manifest.add_output(&self.out, name)?;
        Ok(())
    }

    /// Teacher dataset from a file, or collected with the configured budget.
    /// Latent targets need the teacher latents, which files do not carry.
    fn offline_data(
        &mut self,
        teacher: &PolicyCheckpoint,
        path: Option<&Path>,
        need_latents: bool,
    ) -> Result<TrajectoryDataset, CliError> {
        if let Some(p) = path {
            if !need_latents {
                let data = read_trajectories(p, Dims::default()).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
                self.input(p)?;
                return Ok(data);
            }
            log::warn!("trajectory files carry no teacher latents; collecting the offline data again");
        }
        let d = &self.cfg.distill;
        let mut envs = EnvGroup::new(&self.cfg.terrains, d.num_envs, d.max_difficulty, self.cfg.ranges, self.cfg.seed)
            .map_err(runtime)?;
        let (data, stats) = collect_teacher_dataset(teacher, &mut envs, d.offline_timesteps)?;
        log::info!("collected {} timesteps in {} episodes", stats.timesteps, stats.episodes);
        Ok(data)
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.manifest.wall_time_secs = self.started.elapsed().as_secs_f64();
        self.manifest.write(&self.out.join(MANIFEST_FILE))?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

const DISTILL_CURVE_HEADER: [&str; 5] = ["stage", "round", "update", "train_loss", "heldout_loss"];

fn distill_curve(pretrain: Option<&PretrainReport>, correction: Option<&CorrectionReport>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    if let Some(p) = pretrain {
        for pt in &p.train.curve {
            rows.push(vec!["pretrain".into(), String::new(), pt.update.to_string(), opt(pt.train_loss), opt(pt.heldout_loss)]);
        }
    }
    if let Some(c) = correction {
        for r in &c.rounds {
            for pt in &r.train.curve {
                rows.push(vec![
                    "correct".into(),
                    r.round.to_string(),
                    pt.update.to_string(),
                    opt(pt.train_loss),
                    opt(pt.heldout_loss),
                ]);
            }
        }
    }
    rows
}

fn write_gap(run: &mut Run, c: &CorrectionReport) -> Result<(), CliError> {
    let mut rows = vec![vec!["before".to_string(), String::new(), c.gap_before.to_string()]];
    for r in &c.rounds {
        rows.push(vec!["round".into(), r.round.to_string(), r.rollout.mean_gap.to_string()]);
    }
    rows.push(vec!["after".into(), String::new(), c.gap_after.to_string()]);
    run.csv("gap.csv", &header(&["when", "round", "mean_gap"]), rows)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::TrainTeacher { common } => {
            let mut run = Run::start("train-teacher", &common)?;
            let training = run.cfg.teacher_training();
            let result = train_teacher(&training, &mut |row| {
                if row.iteration % 10 == 0 {
                    log::info!(
                        "iteration {} return {} tracking {:.3} difficulty {:.2}",
                        row.iteration,
                        opt(row.mean_return),
                        row.mean_tracking,
                        row.max_difficulty
                    );
                }
            });
            let teacher = match result {
                Ok(t) => t,
                Err(PpoError::Diverged { iteration, last_good }) => {
                    run.save_checkpoint(&last_good)?;
                    run.finish()?;
                    return Err(runtime(format!("training diverged at iteration {iteration}; kept the last good checkpoint")));
                }
                Err(e) => return Err(e.into()),
            };
            run.save_checkpoint(&teacher.checkpoint)?;
            let kinds = run.cfg.terrains.clone();
            let mut names = header(&["iteration", "mean_return", "mean_episode_len"]);
            names.extend(kinds.iter().map(|k| format!("return_{k}")));
            let rows = teacher
                .curve
                .iter()
                .map(|r| {
                    let mut row = vec![r.iteration.to_string(), opt(r.mean_return), opt(r.mean_episode_len)];
                    row.extend(kinds.iter().map(|k| opt(r.per_terrain.get(k).copied())));
                    row
                })
                .collect();
            run.csv(CURVE_FILE, &names, rows)?;
            run.finish()
        }
        Command::Collect {
            common,
            teacher,
            student,
            timesteps,
        } => {
            let mut run = Run::start("collect", &common)?;
            let teacher = run.checkpoint(&teacher)?;
            let d = run.cfg.distill.clone();
            let mut envs =
                EnvGroup::new(&run.cfg.terrains, d.num_envs, d.max_difficulty, run.cfg.ranges, run.cfg.seed).map_err(runtime)?;
            let (data, stats) = match student {
                None => collect_teacher_dataset(&teacher, &mut envs, timesteps.unwrap_or(d.offline_timesteps))?,
                Some(path) => {
                    let ckpt = run.checkpoint(&path)?;
                    let policy = Policy::from_checkpoint(&ckpt).map_err(|e| CliError::Config(e.to_string()))?;
                    collect_student_dataset(&policy, &teacher, &mut envs, timesteps.unwrap_or(d.online_timesteps))?
                }
            };
            log::info!(
                "{} timesteps, {} episodes, {} falls, mean gap {:.4}",
                stats.timesteps,
                stats.episodes,
                stats.falls,
                stats.mean_gap
            );
            write_trajectories(&data, &run.out.join(TRAJECTORY_FILE)).map_err(runtime)?;
            run.manifest.add_output(&run.out, TRAJECTORY_FILE)?;
            run.finish()
        }
        Command::Pretrain { common, teacher, data } => {
            let mut run = Run::start("pretrain", &common)?;
            let teacher = run.checkpoint(&teacher)?;
            run.cfg.distill.validate_for(&run.cfg.transformer)?;
            let data = run.offline_data(&teacher, data.as_deref(), false)?;
            let result = train_variant(Variant::NoOc, &teacher, &data, &run.cfg.transformer, &run.cfg.distill, run.cfg.seed)?;
            run.save_checkpoint(&result.checkpoint)?;
            run.csv(CURVE_FILE, &header(&DISTILL_CURVE_HEADER), distill_curve(result.pretrain.as_ref(), None))?;
            run.finish()
        }
        Command::Correct {
            common,
            teacher,
            student,
            data,
        } => {
            let mut run = Run::start("correct", &common)?;
            let teacher = run.checkpoint(&teacher)?;
            let student = Student::from_checkpoint(&run.checkpoint(&student)?)?;
            let mut aggregate = match data {
                Some(p) => {
                    let d = read_trajectories(&p, Dims::default()).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
                    run.input(&p)?;
                    d
                }
                None => TrajectoryDataset::default(),
            };
            let mut trainer = Trainer::new(student, run.cfg.seed);
            let report = correct_online(&mut trainer, &teacher, &mut aggregate, &run.cfg.distill, run.cfg.seed)?;
            let meta = Metadata {
                seed: run.cfg.seed,
                stage: "correct".into(),
                iteration: trainer.updates_done,
            };
            run.save_checkpoint(&trainer.student.checkpoint(&teacher, meta)?)?;
            run.csv(CURVE_FILE, &header(&DISTILL_CURVE_HEADER), distill_curve(None, Some(&report)))?;
            write_gap(&mut run, &report)?;
            run.finish()
        }
        Command::TrainBaseline { common, teacher } => {
            let mut run = Run::start("train-baseline", &common)?;
            let teacher = run.checkpoint(&teacher)?;
            let result = train_tcn_student(&teacher, &run.cfg.distill, run.cfg.seed)?;
            run.save_checkpoint(&result.checkpoint)?;
            run.csv(CURVE_FILE, &header(&DISTILL_CURVE_HEADER), distill_curve(None, result.correction.as_ref()))?;
            if let Some(c) = &result.correction {
                write_gap(&mut run, c)?;
            }
            run.finish()
        }
        Command::Ablate {
            common,
            variant,
            teacher,
            data,
        } => {
            let mut run = Run::start("ablate", &common)?;
            let teacher = run.checkpoint(&teacher)?;
            let needs_offline = !matches!(variant, Variant::NoOp | Variant::Rma);
            let latent = matches!(variant, Variant::LatentTransformer);
            let offline = if needs_offline {
                run.offline_data(&teacher, data.as_deref(), latent)?
            } else {
                TrajectoryDataset::default()
            };
            let result = train_variant(variant, &teacher, &offline, &run.cfg.transformer, &run.cfg.distill, run.cfg.seed)?;
            run.save_checkpoint(&result.checkpoint)?;
            run.csv(
                CURVE_FILE,
                &header(&DISTILL_CURVE_HEADER),
                distill_curve(result.pretrain.as_ref(), result.correction.as_ref()),
            )?;
            if let Some(c) = &result.correction {
                write_gap(&mut run, c)?;
            }
            run.finish()
        }
        Command::Eval {
            common,
            checkpoint,
            terrains,
            policy_id,
        } => {
            let mut run = Run::start("eval", &common)?;
            let id = policy_id.unwrap_or_else(|| {
                checkpoint
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "policy".into())
            });
            let ckpt = run.checkpoint(&checkpoint)?;
            let mut cfg = run.cfg.eval_config();
            if !terrains.is_empty() {
                cfg.kinds = terrains;
            }
            let result = evaluate(&ckpt, &id, &cfg)?;
            run.csv("metrics.csv", &header(&METRIC_HEADER), result.rows.iter().map(|r| r.fields()).collect())?;
            let indexed = result.indexed_episodes();
            let rows = indexed
                .iter()
                .map(|(n, e)| {
                    vec![
                        e.terrain.to_string(),
                        e.difficulty.to_string(),
                        n.to_string(),
                        e.len().to_string(),
                        e.episode_return().to_string(),
                        opt(smoothness(&e.actions)),
                        opt(energy(&e.torques, &e.joint_velocities)),
                        e.fell.to_string(),
                    ]
                })
                .collect();
            run.csv(
                "episodes.csv",
                &header(&["terrain", "difficulty", "episode", "steps", "return", "smoothness", "energy", "fell"]),
                rows,
            )?;
            let steps = indexed.iter().flat_map(|(n, e)| e.step_rows(*n)).collect();
            run.csv("steps.csv", &header(&STEP_HEADER), steps)?;
            run.finish()
        }
        Command::Attn {
            common,
            checkpoint,
            terrain,
            difficulty,
            steps,
        } => {
            let mut run = Run::start("attn", &common)?;
            let ckpt = run.checkpoint(&checkpoint)?;
            let spec = TerrainSpec::new(terrain, difficulty, run.cfg.seed);
            let dump = dump_attention(&ckpt, spec, steps, RangeSet::Testing, run.cfg.seed)?;
            let width = dump.mean.first().map_or(0, |r| r.len());
            let mut names = vec!["step".to_string()];
            names.extend((0..width).map(|i| format!("pos{i}")));
            let rows = dump
                .mean
                .iter()
                .enumerate()
                .map(|(t, r)| std::iter::once(t.to_string()).chain(r.iter().map(|v| v.to_string())).collect())
                .collect();
            run.csv("attention.csv", &names, rows)?;
            run.finish()
        }
        Command::Hidden {
            common,
            checkpoint,
            terrains,
            difficulty,
            steps,
        } => {
            let mut run = Run::start("hidden", &common)?;
            let ckpt = run.checkpoint(&checkpoint)?;
            let kinds = if terrains.is_empty() { run.cfg.eval.terrains.clone() } else { terrains };
            let dump = dump_hidden(&ckpt, &kinds, steps, difficulty, RangeSet::Testing, run.cfg.seed)?;
            let width = dump.first().map_or(0, |r| r.1.len());
            let mut names = vec!["terrain".to_string()];
            names.extend((0..width).map(|i| format!("h{i}")));
            let rows = dump
                .iter()
                .map(|(k, h)| std::iter::once(k.to_string()).chain(h.iter().map(|v| v.to_string())).collect())
                .collect();
            run.csv("hidden.csv", &names, rows)?;
            run.finish()
        }
        Command::SweepSeqlen {
            common,
            teacher,
            data,
            lengths,
        } => {
            let mut run = Run::start("sweep-seqlen", &common)?;
            if lengths.is_empty() {
                return Err(CliError::Config("--lengths needs at least one value".into()));
            }
            let teacher = run.checkpoint(&teacher)?;
            let data = run.offline_data(&teacher, data.as_deref(), false)?;
            let eval = run.cfg.eval_config();
            let rows = sequence_length_sweep(
                &teacher,
                &data,
                &lengths,
                &run.cfg.transformer,
                &run.cfg.distill,
                &eval,
                run.cfg.seed,
            )?;
            run.csv("sweep.csv", &header(&SWEEP_HEADER), rows.iter().map(|r| r.fields()).collect())?;
            run.finish()
        }
        Command::ExportTerrain {
            terrain,
            difficulty,
            seed,
            out,
        } => {
            if !(0.0..=1.0).contains(&difficulty) {
                return Err(CliError::Config("--difficulty must lie in [0, 1]".into()));
            }
            let t = Terrain::generate(TerrainSpec::new(terrain, difficulty, seed)).map_err(runtime)?;
            let rows: Vec<Vec<String>> = t.sample_grid(0.01).into_iter().map(|(x, h)| vec![x.to_string(), h.to_string()]).collect();
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_csv(&out, &header(&["x", "h"]), rows)?;
            Ok(())
        }
    }
}
