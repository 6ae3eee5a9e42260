//! Checkpoint directory format.
//!
//! A checkpoint is a directory of three files:
//!
//! * `config.json` — format version plus the encoder / adapter / training
//!   configs of the run;
//! * `tensors.bin` — every parameter as a concatenated little-endian `f32`
//!   blob, in registry order;
//! * `tensors.json` — the ordered index `[{name, shape, offset}]` into the
//!   blob.
//!
//! Adapter-only directories (see [`crate::lora::AdapterState`]) share the
//! same layout with `kind = "adapter"`. Writes go through a temp directory
//! and a final rename, so a killed process never leaves a partial
//! checkpoint behind.

use crate::io_util::atomic_write_dir;
use crate::lora::LoraConfig;
use crate::model::{EncoderConfig, EncoderModel, Scalar};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::io;
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

const CONFIG_FILE: &str = "config.json";
const BLOB_FILE: &str = "tensors.bin";
const INDEX_FILE: &str = "tensors.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: io::Error,
    },
    #[error("bad json in {path}: {source}")]
    Json {
        path: std::path::PathBuf,
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("corrupt tensor index: {0}")]
    CorruptIndex(String),
    #[error("corrupt tensor blob: {0}")]
    CorruptBlob(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("adapter config stored in checkpoint is unusable: {0}")]
    BadAdapterConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Checkpoint,
    Adapter,
}

/// Contents of `config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub encoder: EncoderConfig,
    pub lora: Option<LoraConfig>,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub(crate) fn write_meta(dir: &Path, meta: &CheckpointMeta) -> io::Result<()> {
    let json = serde_json::to_vec_pretty(meta).expect("meta is serializable");
    std::fs::write(dir.join(CONFIG_FILE), json)
}

pub(crate) fn read_meta(dir: &Path) -> Result<CheckpointMeta, CheckpointError> {
    let path = dir.join(CONFIG_FILE);
    let bytes = std::fs::read(&path).map_err(|source| CheckpointError::Io {
        path: path.clone(),
        source,
    })?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes).map_err(|source| CheckpointError::Json { path, source })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: meta.format_version,
        });
    }
    Ok(meta)
}

/// Write `tensors.bin` + `tensors.json` into `dir` (not atomic by itself;
/// callers wrap the whole directory).
pub(crate) fn write_tensor_files(
    dir: &Path,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> io::Result<()> {
    let mut blob = Vec::new();
    let mut index = Vec::with_capacity(tensors.len());
    for (name, shape, data) in tensors {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        index.push(IndexEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: blob.len() as u64,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(dir.join(BLOB_FILE), &blob)?;
    let json = serde_json::to_vec_pretty(&index).expect("index is serializable");
    std::fs::write(dir.join(INDEX_FILE), &json)
}

/// Read the blob back. Validates that offsets are strictly increasing,
/// contiguous, and that the blob length matches the index exactly.
pub(crate) fn read_tensor_files(
    dir: &Path,
) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>, CheckpointError> {
    let index_path = dir.join(INDEX_FILE);
    let bytes = std::fs::read(&index_path).map_err(|source| CheckpointError::Io {
        path: index_path.clone(),
        source,
    })?;
    let index: Vec<IndexEntry> = serde_json::from_slice(&bytes)
        .map_err(|e| CheckpointError::CorruptIndex(e.to_string()))?;

    let blob_path = dir.join(BLOB_FILE);
    let blob = std::fs::read(&blob_path).map_err(|source| CheckpointError::Io {
        path: blob_path,
        source,
    })?;

    let mut expected_offset = 0u64;
    let mut out = Vec::with_capacity(index.len());
    for entry in &index {
        if entry.offset != expected_offset {
            return Err(CheckpointError::CorruptIndex(format!(
                "tensor {} at offset {}, expected {}",
                entry.name, entry.offset, expected_offset
            )));
        }
        let count = entry.shape.iter().product::<usize>();
        let bytes_len = count * 4;
        let start = entry.offset as usize;
        let end = start + bytes_len;
        if end > blob.len() {
            return Err(CheckpointError::CorruptBlob(format!(
                "tensor {} needs bytes {}..{} but blob has {}",
                entry.name,
                start,
                end,
                blob.len()
            )));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((entry.name.clone(), entry.shape.clone(), data));
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        return Err(CheckpointError::CorruptBlob(format!(
            "blob has {} trailing bytes",
            blob.len() - expected_offset as usize
        )));
    }
    Ok(out)
}

fn collect_tensors<T: Scalar>(model: &EncoderModel<T>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut tensors = Vec::new();
    model.for_each_param(&mut |name, shape, data, _| {
        tensors.push((
            name.to_string(),
            shape.to_vec(),
            data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        ));
    });
    tensors
}

/// Save a full checkpoint of `model` (atomic directory write).
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    model: &EncoderModel<T>,
    lora: Option<&LoraConfig>,
    train: Option<&TrainConfig>,
) -> Result<(), CheckpointError> {
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Checkpoint,
        encoder: model.config().clone(),
        lora: lora.cloned(),
        train: train.cloned(),
    };
    let tensors = collect_tensors(model);
    atomic_write_dir(dir, |tmp| {
        write_meta(tmp, &meta)?;
        write_tensor_files(tmp, &tensors)?;
        Ok(())
    })
    .map_err(|source| CheckpointError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Load a checkpoint: rebuild the model from its configs (re-wrapping
/// adapters when present), then overwrite every parameter from the blob.
/// The blob must cover the parameter set exactly.
pub fn load_checkpoint<T: Scalar>(
    dir: &Path,
) -> Result<(EncoderModel<T>, CheckpointMeta), CheckpointError> {
    let meta = read_meta(dir)?;
    if meta.kind != CheckpointKind::Checkpoint {
        return Err(CheckpointError::CorruptIndex(format!(
            "{} is an adapter directory, not a checkpoint",
            dir.display()
        )));
    }
    let mut model = EncoderModel::<T>::init(&meta.encoder)?;
    if let Some(lora) = &meta.lora {
        model = crate::lora::wrap_model(model, lora, meta.encoder.seed)
            .map_err(|e| CheckpointError::BadAdapterConfig(e.to_string()))?;
    }

    let tensors = read_tensor_files(dir)?;
    let mut by_name: std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)> = tensors
        .into_iter()
        .map(|(n, s, d)| (n, (s, d)))
        .collect();

    let mut error: Option<CheckpointError> = None;
    model.for_each_param_mut(&mut |name, shape, data, _| {
        if error.is_some() {
            return;
        }
        match by_name.remove(name) {
            Some((stored_shape, values)) => {
                if stored_shape != shape {
                    error = Some(CheckpointError::ShapeMismatch {
                        name: name.to_string(),
                        expected: shape.to_vec(),
                        found: stored_shape,
                    });
                    return;
                }
                for (dst, src) in data.iter_mut().zip(values.iter()) {
                    *dst = T::from_f32(*src).expect("finite value");
                }
            }
            None => error = Some(CheckpointError::MissingTensor(name.to_string())),
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    if let Some(name) = by_name.into_keys().next() {
        return Err(CheckpointError::UnexpectedTensor(name));
    }
    Ok((model, meta))
}
