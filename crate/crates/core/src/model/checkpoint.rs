//! Checkpoint directories: `manifest.json` plus `params.bin`, the raw
//! little-endian f32 values of every tensor in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchConfig, ModelState};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("parameter file holds {got} bytes, manifest needs {expected}")]
    Size { expected: usize, got: usize },
    #[error("manifest does not match the architecture: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub iteration: u64,
    pub arch: ArchConfig,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

pub fn save_checkpoint(state: &ModelState, iteration: u64, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = CheckpointManifest {
        format: "f32le".into(),
        iteration,
        arch: state.arch.clone(),
        tensors: state.params.iter().map(|p| TensorEntry { name: p.name.clone(), shape: p.shape.clone() }).collect(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&mpath))?;
    let mut bytes = Vec::with_capacity(state.num_parameters() * 4);
    for p in &state.params {
        for &v in &p.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let ppath = dir.join(PARAMS_FILE);
    fs::write(&ppath, bytes).map_err(io_err(&ppath))?;
    Ok(())
}

/// Returns the state and the iteration counter stored with it.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, u64), CheckpointError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != "f32le" {
        return Err(CheckpointError::Layout(format!("unknown format {}", manifest.format)));
    }
    let mut state = ModelState::zeros(manifest.arch.clone()).map_err(|e| CheckpointError::Layout(e.to_string()))?;
    if state.params.len() != manifest.tensors.len() {
        return Err(CheckpointError::Layout(format!(
            "{} tensors listed, architecture has {}",
            manifest.tensors.len(),
            state.params.len()
        )));
    }
    for (p, t) in state.params.iter().zip(&manifest.tensors) {
        if p.name != t.name || p.shape != t.shape {
            return Err(CheckpointError::Layout(format!("{} {:?} vs {} {:?}", t.name, t.shape, p.name, p.shape)));
        }
    }
    let ppath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&ppath).map_err(io_err(&ppath))?;
    let expected = state.num_parameters() * 4;
    if bytes.len() != expected {
        return Err(CheckpointError::Size { expected, got: bytes.len() });
    }
    let mut chunks = bytes.chunks_exact(4);
    for p in &mut state.params {
        for v in &mut p.data {
            let c = chunks.next().expect("size checked");
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
    }
    Ok((state, manifest.iteration))
}
