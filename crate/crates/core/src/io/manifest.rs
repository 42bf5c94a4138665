use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Git-style object hash of a file's content: SHA-256 over `blob <len>\0`
/// followed by the bytes, as in a SHA-256 git repository.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(content_hash(&std::fs::read(path)?))
}

/// Record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

impl Manifest {
    pub fn new(command: &str, config_json: &str, seed: u64, deterministic: bool) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hex::encode(Sha256::digest(config_json.as_bytes())),
            seed,
            deterministic,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_time_secs: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    /// Records an output under its file name, relative to the output directory.
    pub fn add_output(&mut self, dir: &Path, name: &str) -> std::io::Result<()> {
        self.outputs.insert(name.to_string(), file_hash(&dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        super::write_atomic(path, json.as_bytes())
    }
}
