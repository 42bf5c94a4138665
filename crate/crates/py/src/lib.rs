//! Python bindings: terrain profiles, checkpoint inspection, GAE and policy evaluation.
//!
//! Build a wheel-less module with
//! `cargo build --release -p tert-py --features extension-module` and copy
//! `libtert.so` to `tert.so` somewhere on `PYTHONPATH`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tert_core::eval::{evaluate as run_eval, EvalConfig};
use tert_core::models::{load_checkpoint, CheckpointError};
use tert_core::sim::{Terrain, TerrainKind, TerrainSpec};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn checkpoint_err(e: CheckpointError) -> PyErr {
    match e {
        CheckpointError::Io(e) => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

/// Terrain kinds by name.
#[pyfunction]
fn terrain_kinds() -> Vec<&'static str> {
    TerrainKind::ALL.iter().map(|k| k.name()).collect()
}

/// `(x, h)` samples of a terrain on a regular grid.
#[pyfunction]
#[pyo3(signature = (kind, difficulty, seed, step=0.01))]
fn terrain_profile(kind: &str, difficulty: f64, seed: u64, step: f64) -> PyResult<Vec<(f64, f64)>> {
    let kind: TerrainKind = kind.parse().map_err(value_err)?;
    if !(0.0..=1.0).contains(&difficulty) || !(step > 0.0) {
        return Err(value_err("difficulty must lie in [0, 1] and step must be positive"));
    }
    let t = Terrain::generate(TerrainSpec::new(kind, difficulty, seed)).map_err(value_err)?;
    Ok(t.sample_grid(step))
}

/// Generalized advantage estimates and returns. `values` has one more entry than `rewards`.
#[pyfunction]
fn gae(rewards: Vec<f32>, values: Vec<f32>, dones: Vec<bool>, gamma: f64, lam: f64) -> PyResult<(Vec<f32>, Vec<f32>)> {
    if values.len() != rewards.len() + 1 || dones.len() != rewards.len() {
        return Err(value_err("need len(values) == len(rewards) + 1 == len(dones) + 1"));
    }
    Ok(tert_core::ppo::compute_gae(&rewards, &values, &dones, gamma, lam))
}

/// Kind, metadata and parameter count of a checkpoint file.
#[pyfunction]
fn checkpoint_info(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyDict>> {
    let c = load_checkpoint(&path).map_err(checkpoint_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("kind", c.kind.to_string())?;
    d.set_item("seed", c.metadata.seed)?;
    d.set_item("stage", c.metadata.stage)?;
    d.set_item("iteration", c.metadata.iteration)?;
    d.set_item("tensors", c.params.len())?;
    d.set_item("scalars", c.params.num_scalars())?;
    Ok(d.unbind())
}

/// Evaluates a checkpoint; one dict per (terrain, difficulty) cell.
#[pyfunction]
#[pyo3(signature = (path, terrains=None, difficulties=None, episodes=5, max_steps=1000, seed=0))]
fn evaluate(
    py: Python<'_>,
    path: PathBuf,
    terrains: Option<Vec<String>>,
    difficulties: Option<Vec<f64>>,
    episodes: usize,
    max_steps: u32,
    seed: u64,
) -> PyResult<Vec<Py<PyDict>>> {
    let ckpt = load_checkpoint(&path).map_err(checkpoint_err)?;
    let mut cfg = EvalConfig {
        episodes,
        max_steps,
        seed,
        ..EvalConfig::default()
    };
    if let Some(t) = terrains {
        cfg.kinds = t.iter().map(|k| k.parse()).collect::<Result<_, _>>().map_err(value_err)?;
    }
    if let Some(d) = difficulties {
        cfg.difficulties = d;
    }
    let ev = py.allow_threads(|| run_eval(&ckpt, "python", &cfg)).map_err(value_err)?;
    ev.rows
        .iter()
        .map(|r| {
            let d = PyDict::new_bound(py);
            d.set_item("terrain", r.terrain.name())?;
            d.set_item("difficulty", r.difficulty)?;
            d.set_item("episodes", r.episodes)?;
            d.set_item("return_mean", r.return_mean)?;
            d.set_item("return_std", r.return_std)?;
            d.set_item("smooth_mean", r.smooth_mean)?;
            d.set_item("smooth_std", r.smooth_std)?;
            d.set_item("energy_mean", r.energy_mean)?;
            d.set_item("energy_std", r.energy_std)?;
            d.set_item("success_rate", r.success_rate)?;
            Ok(d.unbind())
        })
        .collect()
}

/// Git-style blob hash of some bytes.
#[pyfunction]
fn content_hash(data: &[u8]) -> String {
    tert_core::io::content_hash(data)
}

#[pymodule]
fn tert(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(terrain_kinds, m)?)?;
    m.add_function(wrap_pyfunction!(terrain_profile, m)?)?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_info, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(content_hash, m)?)?;
    Ok(())
}
