//! On-disk parameter snapshots: a JSON manifest next to a little-endian blob.
//!
//! The manifest records every tensor's name, shape, byte offset and dtype, and
//! the SHA-256 of the blob. Loading recomputes the hash before decoding.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{NumericsError, ParamStore, Tensor};

pub const FORMAT_NAME: &str = "spdtp-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub dtype: DType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub blob_bytes: usize,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint blob hash mismatch (manifest {expected}, blob {actual})")]
    HashMismatch { expected: String, actual: String },
    #[error("invalid checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Blob path used for a manifest at `manifest`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes `store` into manifest + blob bytes.
pub fn encode(
    store: &ParamStore,
    dtype: DType,
    blob_name: &str,
    metadata: serde_json::Value,
) -> (CheckpointManifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(store.num_scalars() * dtype.size());
    let mut tensors = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
            dtype,
        });
        for &v in p.value.data() {
            match dtype {
                DType::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        blob: blob_name.to_string(),
        blob_bytes: blob.len(),
        sha256: sha256_hex(&blob),
        tensors,
        metadata,
    };
    (manifest, blob)
}

/// Rebuilds a parameter store from manifest + blob, validating the hash.
pub fn decode(manifest: &CheckpointManifest, blob: &[u8]) -> Result<ParamStore, CheckpointError> {
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let actual = sha256_hex(blob);
    if actual != manifest.sha256 {
        return Err(CheckpointError::HashMismatch {
            expected: manifest.sha256.clone(),
            actual,
        });
    }
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let size = entry.dtype.size();
        let end = entry.offset + count * size;
        let bytes = blob.get(entry.offset..end).ok_or_else(|| {
            CheckpointError::Format(format!(
                "tensor `{}` spans bytes {}..{end} beyond blob of {}",
                entry.name,
                entry.offset,
                blob.len()
            ))
        })?;
        let data = bytes
            .chunks_exact(size)
            .map(|c| match entry.dtype {
                DType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            })
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok(store)
}

/// Writes the manifest to `path` and the blob next to it (`.bin` extension).
pub fn save(
    path: &Path,
    store: &ParamStore,
    dtype: DType,
    metadata: serde_json::Value,
) -> Result<(), CheckpointError> {
    let blob_file = blob_path(path);
    let blob_name = blob_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CheckpointError::Format(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    let (manifest, blob) = encode(store, dtype, &blob_name, metadata);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&blob_file, &blob).map_err(io_err(&blob_file))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

/// Reads a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<(ParamStore, CheckpointManifest), CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let blob_file = path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(io_err(&blob_file))?;
    let store = decode(&manifest, &blob)?;
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "a.w",
            Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.0, 1e-300, 7.25, -0.0]).unwrap(),
        )
        .unwrap();
        s.insert("b", Tensor::vector(vec![std::f64::consts::PI]))
            .unwrap();
        s
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let s = store();
        save(&path, &s, DType::F64, serde_json::json!({"epoch": 3})).unwrap();
        let (back, manifest) = load(&path).unwrap();
        assert_eq!(manifest.metadata["epoch"], 3);
        for (name, p) in s.iter() {
            let q = back.value(name).unwrap();
            let bits: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let back_bits: Vec<u64> = q.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, back_bits);
        }
        assert_eq!(manifest.tensors[0].offset, 0);
        assert_eq!(manifest.tensors[1].offset, 48);
    }

    #[test]
    fn f32_round_trip_rounds_to_single_precision() {
        let s = store();
        let (m, blob) = encode(&s, DType::F32, "x.bin", serde_json::Value::Null);
        assert_eq!(blob.len(), 7 * 4);
        let back = decode(&m, &blob).unwrap();
        assert_eq!(
            back.value("b").unwrap().data()[0],
            std::f64::consts::PI as f32 as f64
        );
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let s = store();
        let (m, mut blob) = encode(&s, DType::F64, "x.bin", serde_json::Value::Null);
        blob[3] ^= 1;
        assert!(matches!(
            decode(&m, &blob),
            Err(CheckpointError::HashMismatch { .. })
        ));
    }
}
