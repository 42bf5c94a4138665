use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::models::{Metadata, Policy, PolicyCheckpoint, TransformerSpec};
use crate::sim::ACT_DIM;

use super::collect::{collect_student_dataset, EnvGroup, RolloutStats};
use super::train::{Student, Target, TrainReport, Trainer};
use super::{DistillConfig, DistillError, Source, TrajectoryDataset};

const INIT_STREAM: u64 = 0x1F83_D9AB_FB41_BD6B;
const PRETRAIN_STREAM: u64 = 0x5BE0_CD19_137E_2179;
const ROLLOUT_STREAM: u64 = 0x6A09_E667_F3BC_C908;
const GAP_STREAM: u64 = 0x3C6E_F372_FE94_F82B;
const CORRECT_STREAM: u64 = 0xA54F_F53A_5F1D_36F1;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub train: TrainReport,
    pub train_timesteps: usize,
    pub heldout_timesteps: usize,
}

/// Supervised training on teacher rollouts, windows conditioned on the
/// teacher's actions. 5% of the trajectories (by default) are held out.
pub fn pretrain_offline(
    dataset: &TrajectoryDataset,
    student: Student,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(Trainer, PretrainReport), DistillError> {
    cfg.validate()?;
    if let Some(t) = dataset.trajectories.iter().find(|t| t.source != Source::TeacherRollout) {
        return Err(DistillError::Dataset(format!(
            "offline pretraining needs teacher rollouts, found {:?}",
            t.source
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PRETRAIN_STREAM);
    let (train, heldout) = dataset.split(cfg.heldout_fraction, &mut rng);
    let mut trainer = Trainer::new(student, seed);
    let report = trainer.train(&[&train], None, &heldout, cfg.offline_updates, cfg, &mut rng)?;
    Ok((
        trainer,
        PretrainReport {
            train: report,
            train_timesteps: train.timesteps(),
            heldout_timesteps: heldout.timesteps(),
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub rollout: RolloutStats,
    pub aggregate_timesteps: usize,
    pub train: TrainReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionReport {
    pub rounds: Vec<RoundReport>,
    /// Mean `||a_student - a_teacher||` on the student's own rollouts before
    /// the first round and after the last, on identically seeded environments.
    pub gap_before: f64,
    pub gap_after: f64,
}

fn student_policy(trainer: &Trainer, teacher: &PolicyCheckpoint, stage: &str) -> Result<Policy, DistillError> {
    let meta = Metadata {
        seed: 0,
        stage: stage.into(),
        iteration: trainer.updates_done,
    };
    Ok(Policy::from_checkpoint(&trainer.student.checkpoint(teacher, meta)?)?)
}

fn measure_gap(trainer: &Trainer, teacher: &PolicyCheckpoint, cfg: &DistillConfig, seed: u64) -> Result<f64, DistillError> {
    let policy = student_policy(trainer, teacher, "gap")?;
    let mut envs = EnvGroup::training(cfg.num_envs, cfg.max_difficulty, seed ^ GAP_STREAM)?;
    let (_, stats) = collect_student_dataset(&policy, teacher, &mut envs, cfg.gap_timesteps)?;
    Ok(stats.mean_gap)
}

/// DAgger rounds: roll out the student (its executed actions fill the
/// windows), label every visited state with the teacher, aggregate, retrain.
/// `aggregate` holds the data from earlier stages and keeps growing.
pub fn correct_online(
    trainer: &mut Trainer,
    teacher: &PolicyCheckpoint,
    aggregate: &mut TrajectoryDataset,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<CorrectionReport, DistillError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CORRECT_STREAM);
    let mut envs = EnvGroup::training(cfg.num_envs, cfg.max_difficulty, seed ^ ROLLOUT_STREAM)?;
    let gap_before = measure_gap(trainer, teacher, cfg, seed)?;
    let mut rounds = Vec::with_capacity(cfg.correction_rounds);
    for round in 0..cfg.correction_rounds {
        let policy = student_policy(trainer, teacher, "correct")?;
        let (fresh, rollout) = collect_student_dataset(&policy, teacher, &mut envs, cfg.online_timesteps)?;
        let weights = cfg.mix_in.map(|m| [m, 1.0 - m]);
        let train = trainer.train(
            &[&*aggregate, &fresh],
            weights.as_ref().map(|w| &w[..]),
            &TrajectoryDataset::default(),
            cfg.online_updates,
            cfg,
            &mut rng,
        )?;
        aggregate.extend(fresh);
        log::info!(
            "correction round {round}: gap {:.4}, aggregate {} steps",
            rollout.mean_gap,
            aggregate.timesteps()
        );
        rounds.push(RoundReport {
            round,
            rollout,
            aggregate_timesteps: aggregate.timesteps(),
            train,
        });
    }
    let gap_after = measure_gap(trainer, teacher, cfg, seed)?;
    Ok(CorrectionReport {
        rounds,
        gap_before,
        gap_after,
    })
}

/// Which student `train_variant` produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Offline pretraining followed by online correction.
    Tert,
    /// Pretraining only.
    NoOc,
    /// Online correction from a random initialization.
    NoOp,
    /// TERT with the Transformer replaced by a TCN predicting actions.
    TcnStudent,
    /// TERT whose Transformer regresses the teacher latent.
    LatentTransformer,
    /// TCN latent estimator trained on-policy only.
    Rma,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Tert,
        Variant::NoOc,
        Variant::NoOp,
        Variant::TcnStudent,
        Variant::LatentTransformer,
        Variant::Rma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tert => "tert",
            Variant::NoOc => "no-oc",
            Variant::NoOp => "no-op",
            Variant::TcnStudent => "tcn-student",
            Variant::LatentTransformer => "latent-transformer",
            Variant::Rma => "rma",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = DistillError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DistillError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub checkpoint: PolicyCheckpoint,
    /// The student as it left offline pretraining.
    pub pretrained: Option<PolicyCheckpoint>,
    pub pretrain: Option<PretrainReport>,
    pub correction: Option<CorrectionReport>,
}

fn latent_dim(teacher: &PolicyCheckpoint) -> Result<usize, DistillError> {
    teacher
        .spec
        .teacher
        .as_ref()
        .map(|t| t.latent_dim)
        .ok_or_else(|| DistillError::Config("expected a teacher checkpoint".into()))
}

fn new_student(
    variant: Variant,
    teacher: &PolicyCheckpoint,
    transformer: &TransformerSpec,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Student, DistillError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INIT_STREAM);
    let tspec = |out| TransformerSpec {
        output_dim: out,
        ..transformer.clone()
    };
    match variant {
        Variant::Tert | Variant::NoOc | Variant::NoOp => Student::transformer(tspec(ACT_DIM), Target::Action, &mut rng),
        Variant::LatentTransformer => Student::transformer(tspec(latent_dim(teacher)?), Target::Latent, &mut rng),
        Variant::TcnStudent => {
            let spec = crate::models::TcnSpec {
                output_dim: ACT_DIM,
                ..cfg.tcn.clone()
            };
            Student::tcn(spec, Target::Action, &mut rng)
        }
        Variant::Rma => {
            let spec = crate::models::TcnSpec {
                output_dim: latent_dim(teacher)?,
                ..cfg.tcn.clone()
            };
            Student::tcn(spec, Target::Latent, &mut rng)
        }
    }
}

/// RMA-style baseline: a TCN over the last `history` steps regresses the
/// teacher latent on its own rollouts and drives the frozen teacher body.
pub fn train_tcn_student(teacher: &PolicyCheckpoint, cfg: &DistillConfig, seed: u64) -> Result<VariantRun, DistillError> {
    train_variant(Variant::Rma, teacher, &TrajectoryDataset::default(), &TransformerSpec::default(), cfg, seed)
}

/// Trains one student variant. `offline` is the teacher dataset used by the
/// variants that pretrain; the others ignore it.
pub fn train_variant(
    variant: Variant,
    teacher: &PolicyCheckpoint,
    offline: &TrajectoryDataset,
    transformer: &TransformerSpec,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<VariantRun, DistillError> {
    if matches!(variant, Variant::Tert | Variant::NoOc | Variant::NoOp | Variant::LatentTransformer) {
        cfg.validate_for(transformer)?;
    } else {
        cfg.validate()?;
    }
    let student = new_student(variant, teacher, transformer, cfg, seed)?;
    let pretrains = !matches!(variant, Variant::NoOp | Variant::Rma);
    let corrects = variant != Variant::NoOc;
    let (mut trainer, pretrain) = if pretrains {
        let (t, r) = pretrain_offline(offline, student, cfg, seed)?;
        (t, Some(r))
    } else {
        (Trainer::new(student, seed), None)
    };
    let pretrained = match pretrains {
        true => Some(trainer.student.checkpoint(
            teacher,
            Metadata {
                seed,
                stage: "pretrain".into(),
                iteration: trainer.updates_done,
            },
        )?),
        false => None,
    };
    let correction = if corrects {
        let mut aggregate = if pretrains { offline.clone() } else { TrajectoryDataset::default() };
        Some(correct_online(&mut trainer, teacher, &mut aggregate, cfg, seed)?)
    } else {
        None
    };
    let stage = if corrects { "correct" } else { "pretrain" };
    let checkpoint = trainer.student.checkpoint(
        teacher,
        Metadata {
            seed,
            stage: stage.into(),
            iteration: trainer.updates_done,
        },
    )?;
    Ok(VariantRun {
        variant,
        checkpoint,
        pretrained,
        pretrain,
        correction,
    })
}
