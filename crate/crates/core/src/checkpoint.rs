//! Checkpoint container: a directory holding a JSON manifest (names,
//! shapes, dtype, trainability) plus one raw tensor blob per parameter.
//!
//! The container is written into a staging directory and renamed into
//! place, so an interrupted save never leaves a partially written
//! checkpoint at the destination. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::tensorfile::{read_tensor, write_tensor, RawTensor};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT_NAME: &str = "misdd-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    dtype: String,
    trainable: bool,
    blob: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    entries: Vec<ManifestEntry>,
}

fn ckpt_error(dir: &Path, reason: impl Into<String>) -> CoreError {
    CoreError::Checkpoint {
        path: dir.display().to_string(),
        reason: reason.into(),
    }
}

/// Serializes the store to `dir` (replacing any existing checkpoint).
pub fn save_checkpoint(store: &ParamStore, dir: &Path) -> Result<()> {
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;

    let mut entries = Vec::with_capacity(store.len());
    for (i, p) in store.iter().enumerate() {
        let blob = format!("{i:05}.bin");
        write_tensor(&staging.join(&blob), &RawTensor::from_matrix(&p.value))?;
        entries.push(ManifestEntry {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            dtype: "f64".to_string(),
            trainable: p.trainable,
            blob,
        });
    }
    let manifest = Manifest {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        entries,
    };
    fs::write(
        staging.join(MANIFEST_NAME),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(())
}

fn staging_path(dir: &Path) -> std::path::PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "checkpoint".to_string());
    dir.with_file_name(format!("{name}.staging"))
}

/// Loads a checkpoint directory back into a parameter store, restoring
/// values, order, and trainability flags.
pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| ckpt_error(dir, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_NAME {
        return Err(ckpt_error(dir, format!("unknown format {:?}", manifest.format)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(ckpt_error(dir, format!("unsupported version {}", manifest.version)));
    }

    let mut store = ParamStore::new();
    for entry in &manifest.entries {
        let raw = read_tensor(&dir.join(&entry.blob))?;
        let tensor = raw.to_matrix().map_err(|_| {
            ckpt_error(dir, format!("blob {} is not a rank-2 f64 tensor", entry.blob))
        })?;
        if tensor.shape() != (entry.rows, entry.cols) {
            return Err(ckpt_error(
                dir,
                format!(
                    "{}: manifest says {}x{}, blob is {}x{}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    tensor.rows(),
                    tensor.cols()
                ),
            ));
        }
        store.insert(&entry.name, tensor, entry.trainable)?;
    }
    Ok(store)
}

/// Concatenated bytes of the manifest and every blob, for bit-exactness
/// assertions in tests and the determinism acceptance check.
pub fn checkpoint_bytes(dir: &Path) -> Result<Vec<u8>> {
    let mut out = fs::read(dir.join(MANIFEST_NAME))?;
    let manifest: Manifest = serde_json::from_slice(&out)?;
    for entry in &manifest.entries {
        out.extend(fs::read(dir.join(&entry.blob))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn demo_store() -> ParamStore {
        let mut store = ParamStore::new();
        store
            .insert("enc.w", Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 1.0 / 3.0, 5e-300]), false)
            .unwrap();
        store
            .insert("prompt.p", Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]), true)
            .unwrap();
        store
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        let store = demo_store();
        save_checkpoint(&store, &ckpt).unwrap();
        let back = load_checkpoint(&ckpt).unwrap();

        assert_eq!(back.len(), store.len());
        let names: Vec<_> = back.names().collect();
        assert_eq!(names, vec!["enc.w", "prompt.p"]);
        for p in store.iter() {
            let q = back.get(&p.name).unwrap();
            assert_eq!(q.trainable, p.trainable);
            for (a, b) in q.value.data().iter().zip(p.value.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn saving_twice_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_checkpoint(&demo_store(), &a).unwrap();
        save_checkpoint(&demo_store(), &b).unwrap();
        assert_eq!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&b).unwrap());
    }

    #[test]
    fn save_replaces_existing() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        save_checkpoint(&demo_store(), &ckpt).unwrap();
        let mut other = ParamStore::new();
        other.insert("only", Tensor::zeros(1, 1), true).unwrap();
        save_checkpoint(&other, &ckpt).unwrap();
        let back = load_checkpoint(&ckpt).unwrap();
        assert_eq!(back.len(), 1);
        assert!(back.contains("only"));
    }

    #[test]
    fn missing_blob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        save_checkpoint(&demo_store(), &ckpt).unwrap();
        fs::remove_file(ckpt.join("00001.bin")).unwrap();
        assert!(load_checkpoint(&ckpt).is_err());
    }
}
