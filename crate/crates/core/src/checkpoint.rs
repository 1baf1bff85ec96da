//! Weights as a flat little-endian f32 file plus a JSON sidecar with
//! parameter names, shapes and the config hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hashing::ConfigHash;
use crate::model::{Model, ModelConfig};
use crate::numerics::Scalar;

pub const FORMAT: &str = "obda-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    /// Hash of the experiment that produced the weights.
    pub config_hash: ConfigHash,
    pub model_config: ModelConfig,
    /// SHA-256 of the weights file, hex.
    pub weights_sha256: String,
    pub tensors: Vec<TensorEntry>,
    /// Caller-defined provenance (full experiment config, step count).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// `<stem>.bin` and `<stem>.json`.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save<T: Scalar>(model: &Model<T>, stem: &Path, config_hash: ConfigHash, extra: serde_json::Value) -> Result<()> {
    let (bin, json) = paths(stem);
    if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = model.store.flat_values().iter().flat_map(|v| (v.to_f64_lossy() as f32).to_le_bytes()).collect();
    let sidecar = Sidecar {
        format: FORMAT.into(),
        config_hash,
        model_config: model.config.clone(),
        weights_sha256: hex(&Sha256::digest(&bytes)),
        tensors: model.store.iter().map(|(_, p)| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect(),
        extra,
    };
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    fs::write(&json, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_sidecar(stem: &Path) -> Result<Sidecar> {
    let (_, json) = paths(stem);
    let text = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&text).map_err(|e| Error::Integrity(format!("{}: {e}", json.display())))?;
    if sidecar.format != FORMAT {
        return Err(Error::Integrity(format!("{}: unknown format {:?}", json.display(), sidecar.format)));
    }
    Ok(sidecar)
}

/// Rebuilds the model from the sidecar's config and loads the weights.
/// `expected` rejects a checkpoint produced under a different experiment.
pub fn load<T: Scalar>(stem: &Path, expected: Option<ConfigHash>) -> Result<(Model<T>, Sidecar)> {
    let sidecar = read_sidecar(stem)?;
    if let Some(h) = expected.filter(|h| *h != sidecar.config_hash) {
        return Err(Error::Integrity(format!("checkpoint config hash {} does not match {h}", sidecar.config_hash)));
    }
    let (bin, _) = paths(stem);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if hex(&Sha256::digest(&bytes)) != sidecar.weights_sha256 {
        return Err(Error::Integrity(format!("{}: checksum mismatch", bin.display())));
    }
    let mut model = Model::<T>::new(sidecar.model_config.clone(), 0)?;
    let layout: Vec<TensorEntry> = model.store.iter().map(|(_, p)| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect();
    if layout != sidecar.tensors {
        return Err(Error::Integrity(format!("{}: tensor layout does not match the model config", bin.display())));
    }
    if bytes.len() != 4 * model.store.num_values() {
        return Err(Error::Integrity(format!("{}: expected {} bytes, found {}", bin.display(), 4 * model.store.num_values(), bytes.len())));
    }
    let values: Vec<T> = bytes.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
    model.store.load_flat(&values)?;
    Ok((model, sidecar))
}
