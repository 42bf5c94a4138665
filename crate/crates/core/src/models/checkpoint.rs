use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{ParamSet, Tensor};

use super::tcn::TcnSpec;
use super::teacher::TeacherSpec;
use super::transformer::TransformerSpec;
use super::ModelError;

const MAGIC: &[u8; 4] = b"TCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("unknown model kind `{0}`")]
    UnknownKind(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which policy a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Privileged encoder + teacher policy + value head.
    Teacher,
    /// Causal Transformer predicting actions.
    Transformer,
    /// Transformer regressing the teacher latent, feeding the frozen teacher body.
    LatentTransformer,
    /// TCN latent estimator feeding the frozen teacher body.
    TcnStudent,
    /// TCN predicting actions directly.
    TcnActor,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Teacher,
        ModelKind::Transformer,
        ModelKind::LatentTransformer,
        ModelKind::TcnStudent,
        ModelKind::TcnActor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Transformer => "transformer",
            ModelKind::LatentTransformer => "latent-transformer",
            ModelKind::TcnStudent => "tcn-student",
            ModelKind::TcnActor => "tcn-actor",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = CheckpointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CheckpointError::UnknownKind(s.to_string()))
    }
}

/// Architecture record; student kinds that reuse the teacher body carry its spec too.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transformer: Option<TransformerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcn: Option<TcnSpec>,
}

impl PolicySpec {
    fn check(&self, kind: ModelKind) -> Result<(), CheckpointError> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(CheckpointError::Manifest(format!("{kind} checkpoint needs a {what} spec")))
            }
        };
        match kind {
            ModelKind::Teacher => need(self.teacher.is_some(), "teacher"),
            ModelKind::Transformer => need(self.transformer.is_some(), "transformer"),
            ModelKind::LatentTransformer => {
                need(self.teacher.is_some(), "teacher")?;
                need(self.transformer.is_some(), "transformer")
            }
            ModelKind::TcnStudent => {
                need(self.teacher.is_some(), "teacher")?;
                need(self.tcn.is_some(), "tcn")
            }
            ModelKind::TcnActor => need(self.tcn.is_some(), "tcn"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub seed: u64,
    pub stage: String,
    pub iteration: u64,
}

/// Named parameters of one policy plus what is needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCheckpoint {
    pub kind: ModelKind,
    pub spec: PolicySpec,
    pub metadata: Metadata,
    pub params: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: String,
    spec: PolicySpec,
    metadata: Metadata,
    tensors: BTreeMap<String, TensorEntry>,
}

impl PolicyCheckpoint {
    pub fn new(kind: ModelKind, spec: PolicySpec, metadata: Metadata, params: ParamSet<f32>) -> Self {
        Self {
            kind,
            spec,
            metadata,
            params,
        }
    }

    /// Serialized file contents. Tensors are stored sorted by name.
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        self.spec.check(self.kind)?;
        let mut sorted: Vec<(&str, &Tensor<f32>)> = self.params.iter().map(|(_, n, t)| (n, t)).collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        let mut tensors = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &sorted {
            tensors.insert(
                name.to_string(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    offset,
                },
            );
            offset += 4 * t.numel() as u64;
        }
        let manifest = Manifest {
            kind: self.kind.name().to_string(),
            spec: self.spec.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut out = Vec::with_capacity(14 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &sorted {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 10 {
            return Err(CheckpointError::Truncated);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let data_start = 10 + mlen;
        if bytes.len() < data_start + 4 {
            return Err(CheckpointError::Truncated);
        }
        let manifest: Manifest =
            serde_json::from_slice(&bytes[10..data_start]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let data_len: u64 = manifest
            .tensors
            .values()
            .map(|t| 4 * t.shape.iter().product::<usize>() as u64)
            .sum();
        let expected_len = data_start + data_len as usize + 4;
        if bytes.len() < expected_len {
            return Err(CheckpointError::Truncated);
        }
        if bytes.len() > expected_len {
            return Err(CheckpointError::Manifest(format!(
                "{} trailing bytes after checksum",
                bytes.len() - expected_len
            )));
        }
        let body = &bytes[..expected_len - 4];
        let stored = u32::from_le_bytes(bytes[expected_len - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let kind: ModelKind = manifest.kind.parse()?;
        manifest.spec.check(kind)?;
        let data = &bytes[data_start..expected_len - 4];
        let mut params = ParamSet::new();
        for (name, entry) in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * n;
            if end > data.len() {
                return Err(CheckpointError::Manifest(format!("tensor `{name}` lies outside the data block")));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&entry.shape, values).map_err(ModelError::from)?;
            params.add(name.clone(), t).map_err(ModelError::from)?;
        }
        Ok(Self {
            kind,
            spec: manifest.spec,
            metadata: manifest.metadata,
            params,
        })
    }
}

pub fn save_checkpoint(ckpt: &PolicyCheckpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = ckpt.to_bytes()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyCheckpoint, CheckpointError> {
    PolicyCheckpoint::from_bytes(&std::fs::read(path)?)
}
