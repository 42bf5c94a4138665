//! Persistence: trajectory files, CSV export, experiment configs and run
//! manifests.

mod config;
mod csv_out;
mod manifest;
mod trajectory;


use std::io::Write;
use std::path::Path;

pub use config::{ConfigError, EvalSettings, ExperimentConfig};
pub use csv_out::{csv_bytes, matrix_rows, write_csv};
pub use manifest::{content_hash, file_hash, Manifest};
pub use trajectory::{
    read_trajectories, trajectories_from_bytes, trajectories_to_bytes, write_trajectories, Dims, TrajectoryFileError,
    TRAJECTORY_VERSION,
};

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never sees a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
