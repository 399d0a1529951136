//! Weight-container I/O.
//!
//! A model on disk is a directory holding `manifest.json` (configuration plus
//! a tensor directory) and `weights.bin` (raw little-endian `f32` values,
//! row-major, each tensor starting at an 8-byte-aligned offset). Tensors are
//! widened to `f64` on load; `save_model` narrows back to `f32`, so a
//! round-trip is bit-exact exactly when every value is `f32`-representable —
//! which the fixture generators guarantee by sampling in `f32`.

use super::{Model, ModelConfig, WeightStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

// ── Manifest schema ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

// ── Errors ──────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum LoadError {
    Io { path: String, detail: String },
    Manifest { detail: String },
    UnknownDtype { name: String, dtype: String },
    BadShape { name: String, detail: String },
    Truncated { name: String, needed: u64, available: u64 },
    Model(super::ModelError),
}

impl fmt::Display for LoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadError::Io { path, detail } => write!(f, "cannot read '{path}': {detail}"),
            LoadError::Manifest { detail } => write!(f, "malformed manifest: {detail}"),
            LoadError::UnknownDtype { name, dtype } => {
                write!(f, "tensor '{name}' has unsupported dtype '{dtype}'")
            }
            LoadError::BadShape { name, detail } => {
                write!(f, "tensor '{name}' has a bad shape entry: {detail}")
            }
            LoadError::Truncated { name, needed, available } => {
                write!(f, "weight blob truncated: tensor '{name}' needs bytes up to {needed}, file has {available}")
            }
            LoadError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LoadError {}

impl From<super::ModelError> for LoadError {
    fn from(e: super::ModelError) -> Self {
        LoadError::Model(e)
    }
}

// ── Load ────────────────────────────────────────────────────────────────────

/// Load and validate a model from explicit manifest and weight-blob paths.
pub fn load_model(manifest_path: &Path, weights_path: &Path) -> Result<Model, LoadError> {
    let manifest_text = fs::read_to_string(manifest_path).map_err(|e| LoadError::Io {
        path: manifest_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| LoadError::Manifest { detail: e.to_string() })?;
    let blob = fs::read(weights_path).map_err(|e| LoadError::Io {
        path: weights_path.display().to_string(),
        detail: e.to_string(),
    })?;

    let mut weights = WeightStore::new();
    for entry in &manifest.tensors {
        weights.insert(entry.name.clone(), decode_tensor(entry, &blob)?);
    }
    Ok(Model::new(manifest.config, weights)?)
}

/// Load a model from a directory holding `manifest.json` and `weights.bin`.
pub fn load_model_dir(dir: &Path) -> Result<Model, LoadError> {
    load_model(&dir.join(MANIFEST_FILE), &dir.join(WEIGHTS_FILE))
}

fn decode_tensor(entry: &TensorEntry, blob: &[u8]) -> Result<Tensor, LoadError> {
    if entry.dtype != "f32" {
        return Err(LoadError::UnknownDtype { name: entry.name.clone(), dtype: entry.dtype.clone() });
    }
    if entry.shape.len() != 2 {
        return Err(LoadError::BadShape {
            name: entry.name.clone(),
            detail: format!("expected 2 extents, got {:?}", entry.shape),
        });
    }
    let (rows, cols) = (entry.shape[0], entry.shape[1]);
    let count = rows.checked_mul(cols).ok_or_else(|| LoadError::BadShape {
        name: entry.name.clone(),
        detail: "extent product overflows".into(),
    })?;
    if entry.byte_len != (count * 4) as u64 {
        return Err(LoadError::BadShape {
            name: entry.name.clone(),
            detail: format!("byte_len {} does not match shape {:?} (f32)", entry.byte_len, entry.shape),
        });
    }
    let end = entry.offset.checked_add(entry.byte_len).ok_or_else(|| LoadError::BadShape {
        name: entry.name.clone(),
        detail: "offset overflow".into(),
    })?;
    if end > blob.len() as u64 {
        return Err(LoadError::Truncated {
            name: entry.name.clone(),
            needed: end,
            available: blob.len() as u64,
        });
    }
    let start = entry.offset as usize;
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let at = start + 4 * i;
        let raw = [blob[at], blob[at + 1], blob[at + 2], blob[at + 3]];
        data.push(f32::from_le_bytes(raw) as f64);
    }
    Tensor::from_vec(rows, cols, data).map_err(|e| LoadError::BadShape {
        name: entry.name.clone(),
        detail: e.to_string(),
    })
}

// ── Save ────────────────────────────────────────────────────────────────────

/// Write a model into `dir` as `manifest.json` + `weights.bin`. Tensors are
/// laid out in name order, each at the next 8-byte-aligned offset.
pub fn save_model(model: &Model, dir: &Path) -> Result<(), LoadError> {
    fs::create_dir_all(dir).map_err(|e| LoadError::Io {
        path: dir.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, tensor) in model.weights.iter() {
        while !blob.len().is_multiple_of(8) {
            blob.push(0);
        }
        let offset = blob.len() as u64;
        for &v in tensor.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: vec![tensor.rows(), tensor.cols()],
            offset,
            byte_len: (tensor.len() * 4) as u64,
        });
    }
    let manifest = Manifest { config: model.config.clone(), tensors: entries };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| LoadError::Manifest { detail: e.to_string() })?;
    let write = |file: &str, bytes: &[u8]| -> Result<(), LoadError> {
        let path = dir.join(file);
        fs::write(&path, bytes).map_err(|e| LoadError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    };
    write(MANIFEST_FILE, manifest_json.as_bytes())?;
    write(WEIGHTS_FILE, &blob)
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_config, zero_weights};
    use super::*;
    use crate::model::PeKind;

    fn write_raw(dir: &Path, manifest: &str, blob: &[u8]) {
        fs::write(dir.join(MANIFEST_FILE), manifest).unwrap();
        fs::write(dir.join(WEIGHTS_FILE), blob).unwrap();
    }

    #[test]
    fn decode_reads_row_major_f32() {
        let entry = TensorEntry {
            name: "t".into(),
            dtype: "f32".into(),
            shape: vec![2, 2],
            offset: 0,
            byte_len: 16,
        };
        let mut blob = Vec::new();
        for v in [1f32, 2.0, 3.0, 4.0] {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let t = decode_tensor(&entry, &blob).unwrap();
        assert_eq!(t.get(0, 0), 1.0);
        assert_eq!(t.get(0, 1), 2.0);
        assert_eq!(t.get(1, 0), 3.0);
        assert_eq!(t.get(1, 1), 4.0);
    }

    #[test]
    fn decode_rejects_unknown_dtype_and_truncation() {
        let mut entry = TensorEntry {
            name: "t".into(),
            dtype: "f64".into(),
            shape: vec![1, 2],
            offset: 0,
            byte_len: 8,
        };
        let blob = vec![0u8; 8];
        assert!(matches!(decode_tensor(&entry, &blob), Err(LoadError::UnknownDtype { .. })));
        entry.dtype = "f32".into();
        entry.offset = 4;
        assert!(matches!(decode_tensor(&entry, &blob), Err(LoadError::Truncated { .. })));
    }

    #[test]
    fn round_trip_preserves_f32_representable_values_bit_exactly() {
        let config = tiny_config(PeKind::Learnable);
        let mut weights = zero_weights(&config);
        // Non-trivial f32-representable values.
        let mut t = Tensor::zeros(config.vocab_size, config.d_model);
        let mut x = 0.1f32;
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                t.set(i, j, x as f64);
                x = x * -1.7 + 0.3;
            }
        }
        weights.insert("embed.table", t);
        let model = Model::new(config, weights).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model_dir(dir.path()).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.weights.len(), model.weights.len());
        for (name, tensor) in model.weights.iter() {
            assert_eq!(loaded.weights.get(name).unwrap(), tensor, "tensor '{name}'");
        }
    }

    #[test]
    fn save_aligns_every_tensor_to_eight_bytes() {
        let config = tiny_config(PeKind::Learnable);
        let model = Model::new(config, zero_weights(&tiny_config(PeKind::Learnable))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert!(!manifest.tensors.is_empty());
        for e in &manifest.tensors {
            assert_eq!(e.offset % 8, 0, "tensor '{}' starts at unaligned offset {}", e.name, e.offset);
        }
    }

    #[test]
    fn missing_required_tensor_is_a_distinct_error() {
        let config = tiny_config(PeKind::Sinusoidal);
        let model = Model::new(config, zero_weights(&tiny_config(PeKind::Sinusoidal))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        // Drop one required tensor from the manifest.
        let manifest_path = dir.path().join(MANIFEST_FILE);
        let mut manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
        manifest.tensors.retain(|e| e.name != "layer0.attn.wq");
        fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_model_dir(dir.path()).unwrap_err();
        assert!(
            matches!(&err, LoadError::Model(super::super::ModelError::MissingWeight { name }) if name == "layer0.attn.wq"),
            "got: {err}"
        );
    }

    #[test]
    fn malformed_manifest_and_missing_files_error_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_model_dir(dir.path()), Err(LoadError::Io { .. })));
        write_raw(dir.path(), "{ not json", &[]);
        assert!(matches!(load_model_dir(dir.path()), Err(LoadError::Manifest { .. })));
    }
}
