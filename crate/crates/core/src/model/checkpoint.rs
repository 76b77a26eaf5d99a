//! Checkpoint persistence: a JSON manifest (tensor names, shapes, offsets,
//! hyperparameters, seed) next to a raw little-endian f64 blob. Round-trips
//! are bit exact.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

use super::{ModelHyper, ModelParams};

pub const CHECKPOINT_FORMAT: &str = "mcgcn-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {0:?}")]
    UnsupportedFormat(String),
    #[error("tensor {name}: manifest says {expected} elements, blob region has {got}")]
    BlobMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("blob is {got} bytes, manifest implies {expected}")]
    BlobLength { expected: usize, got: usize },
    #[error("checkpoint does not match the model layout at tensor {0}")]
    LayoutMismatch(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    hyper: ModelHyper,
    blob_file: String,
    tensors: Vec<TensorEntry>,
}

/// Writes `<dir>/checkpoint.json` and `<dir>/checkpoint.bin`.
pub fn save_checkpoint(dir: &Path, model: &ModelParams, seed: u64) -> Result<PathBuf, CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    model.for_each(&mut |name, t| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.numel();
    });
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        seed,
        hyper: model.hyper,
        blob_file: "checkpoint.bin".to_string(),
        tensors: entries,
    };
    let json_path = dir.join("checkpoint.json");
    let mut f = std::fs::File::create(&json_path)?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    std::fs::write(dir.join(&manifest.blob_file), &blob)?;
    Ok(json_path)
}

/// Loads a checkpoint from its manifest path, returning the model and the
/// seed recorded at save time.
pub fn load_checkpoint(manifest_path: &Path) -> Result<(ModelParams, u64), CheckpointError> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::UnsupportedFormat(manifest.format));
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob_file);
    let mut blob = Vec::new();
    std::fs::File::open(&blob_path)?.read_to_end(&mut blob)?;

    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if blob.len() != total * 8 {
        return Err(CheckpointError::BlobLength {
            expected: total * 8,
            got: blob.len(),
        });
    }

    // Rebuild a skeleton with the right layout, then fill it in manifest
    // order, verifying names and shapes as we go.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(manifest.seed);
    let mut model = ModelParams::init(manifest.hyper, &mut rng);

    let mut expected_names = Vec::new();
    model.for_each(&mut |name, t| expected_names.push((name, t.shape().to_vec())));
    if expected_names.len() != manifest.tensors.len() {
        return Err(CheckpointError::LayoutMismatch(format!(
            "{} tensors in manifest, model has {}",
            manifest.tensors.len(),
            expected_names.len()
        )));
    }
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected_names) {
        if &entry.name != name || &entry.shape != shape {
            return Err(CheckpointError::LayoutMismatch(entry.name.clone()));
        }
        let expected: usize = entry.shape.iter().product();
        if expected != entry.len {
            return Err(CheckpointError::BlobMismatch {
                name: entry.name.clone(),
                expected,
                got: entry.len,
            });
        }
    }

    let mut idx = 0usize;
    let mut fill_err = None;
    model.for_each_mut(&mut |t| {
        if fill_err.is_some() {
            return;
        }
        let entry = &manifest.tensors[idx];
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        if end > blob.len() {
            fill_err = Some(CheckpointError::BlobMismatch {
                name: entry.name.clone(),
                expected: entry.len,
                got: (blob.len() - start) / 8,
            });
            return;
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *t = Tensor::new(entry.shape.clone(), data).expect("validated shape");
        idx += 1;
    });
    if let Some(e) = fill_err {
        return Err(e);
    }

    Ok((model, manifest.seed))
}

use rand::SeedableRng;
