//! Checkpoint layout: `manifest.json` plus one raw little-endian `f64` blob
//! per parameter, stored under `params/<name>.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamSet, Tensor};

pub const CHECKPOINT_FORMAT: &str = "geoecon-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    /// Free-form metadata owned by the caller (model config, normalisation).
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NumericsError + '_ {
    move |source| NumericsError::Io { path: path.to_path_buf(), source }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

pub fn save_checkpoint(dir: &Path, params: &ParamSet, meta: serde_json::Value) -> Result<(), NumericsError> {
    let blob_dir = dir.join("params");
    fs::create_dir_all(&blob_dir).map_err(io_err(&blob_dir))?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        if !valid_name(name) {
            return Err(NumericsError::Checkpoint(format!("parameter name {name:?} is not file-safe")));
        }
        let file = format!("params/{name}.bin");
        let bytes: Vec<u8> = tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        entries.push(ParamEntry { name: name.to_string(), shape: tensor.shape().to_vec(), dtype: "f64".into(), file });
    }
    let manifest = CheckpointManifest { format: CHECKPOINT_FORMAT.into(), meta, params: entries };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    let path = dir.join("manifest.json");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, serde_json::Value), NumericsError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(NumericsError::Checkpoint(format!("unsupported format {:?}", manifest.format)));
    }
    let mut params = ParamSet::new();
    for entry in &manifest.params {
        if entry.dtype != "f64" {
            return Err(NumericsError::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        if !valid_name(&entry.name) || entry.file != format!("params/{}.bin", entry.name) {
            return Err(NumericsError::Checkpoint(format!("{}: unexpected blob path {:?}", entry.name, entry.file)));
        }
        let blob_path = dir.join(&entry.file);
        let bytes = fs::read(&blob_path).map_err(io_err(&blob_path))?;
        let expected: usize = entry.shape.iter().product::<usize>() * 8;
        if bytes.len() != expected {
            return Err(NumericsError::Checkpoint(format!(
                "{}: blob has {} bytes, shape {:?} needs {expected}",
                entry.name,
                bytes.len(),
                entry.shape
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok((params, manifest.meta))
}
