use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::eval::EvalConfig;
use crate::models::{TeacherSpec, TransformerSpec};
use crate::ppo::{PpoConfig, TeacherTraining};
use crate::sim::{RangeSet, TerrainKind};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Evaluation settings; the randomization ranges are always the testing set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub terrains: Vec<TerrainKind>,
    pub difficulties: Vec<f64>,
    pub episodes: usize,
    pub max_steps: u32,
    pub batch: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            terrains: d.kinds,
            difficulties: d.difficulties,
            episodes: d.episodes,
            max_steps: d.max_steps,
            batch: d.batch,
        }
    }
}

/// Every knob of an experiment. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Terrain kinds used for teacher training.
    pub terrains: Vec<TerrainKind>,
    /// Randomization ranges for training and data collection.
    pub ranges: RangeSet,
    /// Difficulty ceiling of the teacher curriculum and of data collection.
    pub max_difficulty: f64,
    /// Threads used for environment stepping.
    pub workers: usize,
    pub ppo: PpoConfig,
    pub teacher: TeacherSpec,
    pub distill: DistillConfig,
    pub transformer: TransformerSpec,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            terrains: TerrainKind::ALL.to_vec(),
            ranges: RangeSet::Training,
            max_difficulty: 1.0,
            workers: 1,
            ppo: PpoConfig::default(),
            teacher: TeacherSpec::default(),
            distill: DistillConfig::default(),
            transformer: TransformerSpec::default(),
            eval: EvalSettings::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.terrains.is_empty() {
            return Err(ConfigError::Invalid("terrains must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.max_difficulty) {
            return Err(ConfigError::Invalid("max_difficulty must lie in [0, 1]".into()));
        }
        self.ppo.validate().map_err(|e| invalid(&e))?;
        self.transformer.validate().map_err(|e| invalid(&e))?;
        self.distill.validate_for(&self.transformer).map_err(|e| invalid(&e))?;
        self.eval_config().validate().map_err(|e| invalid(&e))?;
        let t = &self.teacher;
        if t.obs_dim != crate::sim::OBS_DIM || t.priv_dim != crate::sim::PRIV_DIM || t.act_dim != crate::sim::ACT_DIM {
            return Err(ConfigError::Invalid("teacher dimensions must match the simulator".into()));
        }
        if t.latent_dim != self.distill.tcn.output_dim {
            return Err(ConfigError::Invalid(format!(
                "tcn output_dim {} must equal the teacher latent_dim {}",
                self.distill.tcn.output_dim, t.latent_dim
            )));
        }
        Ok(())
    }

    /// Canonical JSON used for hashing and for the copy stored with outputs.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn teacher_training(&self) -> TeacherTraining {
        TeacherTraining {
            ppo: self.ppo.clone(),
            spec: self.teacher.clone(),
            terrains: self.terrains.clone(),
            max_difficulty: self.max_difficulty,
            ranges: self.ranges,
            seed: self.seed,
            workers: self.workers,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            kinds: self.eval.terrains.clone(),
            difficulties: self.eval.difficulties.clone(),
            episodes: self.eval.episodes,
            max_steps: self.eval.max_steps,
            ranges: RangeSet::Testing,
            batch: self.eval.batch,
            seed: self.seed,
        }
    }
}
