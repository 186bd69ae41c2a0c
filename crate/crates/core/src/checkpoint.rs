//! Directory checkpoints: `manifest.json` plus `params.bin` holding
//! little-endian binary32 values, row-major, concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Result, WmError};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub dtype: String,
    pub seed: u64,
    pub config: Value,
    pub tensors: Vec<TensorEntry>,
    /// Kind-specific top-level fields (policy hyperparameters, key material).
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CheckpointManifest {
    pub fn new(kind: &str, seed: u64, config: Value) -> Self {
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            dtype: "f32".into(),
            seed,
            config,
            tensors: Vec::new(),
            extra: Map::new(),
        }
    }
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(WmError::MissingCheckpoint(dir.to_path_buf()));
    }
    let raw = fs::read(&path).map_err(|e| WmError::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_slice(&raw)?;
    if m.format_version != FORMAT_VERSION {
        return Err(WmError::Config(format!(
            "checkpoint format_version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

/// Writes `params` under `dir`, filling in the tensor table of `manifest`.
pub fn save(dir: &Path, mut manifest: CheckpointManifest, params: &ParamSet<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| WmError::io(dir, e))?;
    let mut blob = Vec::with_capacity(params.num_values() * 4);
    manifest.tensors.clear();
    for (name, t) in params.iter() {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let bin = dir.join(PARAMS_FILE);
    fs::write(&bin, &blob).map_err(|e| WmError::io(&bin, e))?;
    let man = dir.join(MANIFEST_FILE);
    fs::write(&man, serde_json::to_vec_pretty(&manifest)?).map_err(|e| WmError::io(&man, e))?;
    Ok(())
}

/// Reads a checkpoint; every tensor comes back with `requires_grad` set.
pub fn load(dir: &Path) -> Result<(CheckpointManifest, ParamSet<f32>)> {
    let manifest = read_manifest(dir)?;
    let bin = dir.join(PARAMS_FILE);
    let blob = fs::read(&bin).map_err(|e| WmError::io(&bin, e))?;
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.bytes != n * 4 || e.offset + e.bytes > blob.len() {
            return Err(WmError::Config(format!("tensor {} does not fit params.bin", e.name)));
        }
        let data = blob[e.offset..e.offset + e.bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(e.name.clone(), Tensor::from_vec(e.shape.clone(), data)?.trainable());
    }
    Ok((manifest, params))
}

pub fn extra_field<T: serde::de::DeserializeOwned>(m: &CheckpointManifest, key: &str) -> Result<T> {
    let v = m.extra.get(key).ok_or_else(|| WmError::Config(format!("checkpoint manifest lacks `{key}`")))?;
    Ok(serde_json::from_value(v.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.push("a", Tensor::randn(&[3, 4], 1.0, &mut rng));
        p.push("b.c", Tensor::randn(&[5], 0.1, &mut rng));
        let dir = tempfile::tempdir().unwrap();
        let mut m = CheckpointManifest::new("test", 9, serde_json::json!({"x": 1}));
        m.extra.insert("delta".into(), serde_json::json!(1.5));
        save(dir.path(), m, &p).unwrap();
        let (m2, q) = load(dir.path()).unwrap();
        assert_eq!(q.names(), p.names());
        assert_eq!(q.checksum(), p.checksum());
        assert_eq!(m2.seed, 9);
        assert_eq!(extra_field::<f64>(&m2, "delta").unwrap(), 1.5);
        assert_eq!(m2.tensors[1].offset, 48);
    }

    #[test]
    fn missing_dir_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(&dir.path().join("nope")), Err(WmError::MissingCheckpoint(_))));
    }
}
