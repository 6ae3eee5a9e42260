//! Binary feature files and the on-disk feature store.
//!
//! Each utterance is stored as one `.melf` file: magic `MELF`, `u32`
//! version, `u32 n_mels`, `u32 n_frames`, then `n_mels * n_frames`
//! little-endian `f32` values in row-major order. A sidecar `index.json`
//! maps utterance ids to relative file paths.

use super::{DspError, MelSpectrogram};
use crate::io_util::atomic_write;
use ndarray::Array2;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

const MELF_MAGIC: [u8; 4] = *b"MELF";
/// Current feature file format version.
pub const MELF_VERSION: u32 = 1;
const INDEX_FILE: &str = "index.json";

/// Serialize a feature matrix into the `.melf` byte layout.
fn melf_bytes(values: &Array2<f32>) -> Vec<u8> {
    let (n_mels, n_frames) = values.dim();
    let mut bytes = Vec::with_capacity(16 + n_mels * n_frames * 4);
    bytes.extend_from_slice(&MELF_MAGIC);
    bytes.extend_from_slice(&MELF_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(n_mels as u32).to_le_bytes());
    bytes.extend_from_slice(&(n_frames as u32).to_le_bytes());
    for &v in values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Write one feature file atomically.
pub fn write_melf(path: &Path, mel: &MelSpectrogram) -> Result<(), DspError> {
    atomic_write(path, &melf_bytes(&mel.values)).map_err(|source| DspError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read one feature file. The utterance id is not stored in the file; the
/// caller supplies it (normally from the index).
pub fn read_melf(path: &Path, utterance_id: &str) -> Result<MelSpectrogram, DspError> {
    let bytes = fs::read(path).map_err(|source| DspError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: &str| DspError::BadFeatureFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 {
        return Err(bad("shorter than header"));
    }
    if bytes[0..4] != MELF_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MELF_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n_mels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n_frames = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + n_mels * n_frames * 4;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "expected {expected} bytes for {n_mels}x{n_frames}, found {}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array2::from_shape_vec((n_mels, n_frames), data)
        .map_err(|e| bad(&format!("shape error: {e}")))?;
    Ok(MelSpectrogram {
        values,
        utterance_id: utterance_id.to_string(),
    })
}

/// A directory of `.melf` files addressed by utterance id.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    root: PathBuf,
    index: BTreeMap<String, String>,
}

impl FeatureStore {
    /// Create an empty store rooted at `root` (created if missing).
    pub fn create(root: &Path) -> Result<Self, DspError> {
        fs::create_dir_all(root).map_err(|source| DspError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            index: BTreeMap::new(),
        })
    }

    /// Open an existing store by reading its index.
    pub fn open(root: &Path) -> Result<Self, DspError> {
        let index_path = root.join(INDEX_FILE);
        let bytes = fs::read(&index_path).map_err(|source| DspError::Io {
            path: index_path.clone(),
            source,
        })?;
        let index: BTreeMap<String, String> =
            serde_json::from_slice(&bytes).map_err(|e| DspError::BadFeatureFile {
                path: index_path,
                reason: format!("index parse error: {e}"),
            })?;
        Ok(Self {
            root: root.to_path_buf(),
            index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, utterance_id: &str) -> bool {
        self.index.contains_key(utterance_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    /// Path a given utterance would be written to.
    pub fn path_for(&self, utterance_id: &str) -> PathBuf {
        self.root.join(format!("{utterance_id}.melf"))
    }

    /// Write the feature file for `mel` and record it in the index.
    pub fn insert(&mut self, mel: &MelSpectrogram) -> Result<PathBuf, DspError> {
        let path = self.path_for(&mel.utterance_id);
        write_melf(&path, mel)?;
        self.record(&mel.utterance_id);
        Ok(path)
    }

    /// Record an already-written feature file in the index.
    pub fn record(&mut self, utterance_id: &str) {
        self.index
            .insert(utterance_id.to_string(), format!("{utterance_id}.melf"));
    }

    pub fn get(&self, utterance_id: &str) -> Result<MelSpectrogram, DspError> {
        let rel = self
            .index
            .get(utterance_id)
            .ok_or_else(|| DspError::MissingFeature {
                utterance_id: utterance_id.to_string(),
            })?;
        read_melf(&self.root.join(rel), utterance_id)
    }

    /// Persist the index (atomic write). Keys are sorted, so the file bytes
    /// are deterministic for a given set of entries.
    pub fn write_index(&self) -> Result<(), DspError> {
        let path = self.root.join(INDEX_FILE);
        let json = serde_json::to_vec_pretty(&self.index).expect("index is serializable");
        atomic_write(&path, &json).map_err(|source| DspError::Io { path, source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mel(id: &str) -> MelSpectrogram {
        let values =
            Array2::from_shape_fn((4, 6), |(i, j)| (i * 6 + j) as f32 * 0.5 - 3.0);
        MelSpectrogram {
            values,
            utterance_id: id.to_string(),
        }
    }

    #[test]
    fn melf_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.melf");
        let m = mel("u");
        write_melf(&path, &m).unwrap();
        let back = read_melf(&path, "u").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.melf");
        write_melf(&path, &mel("u")).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_melf(&path, "u"),
            Err(DspError::BadFeatureFile { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.melf");
        write_melf(&path, &mel("u")).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_melf(&path, "u"),
            Err(DspError::BadFeatureFile { .. })
        ));
    }

    #[test]
    fn store_roundtrip_via_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FeatureStore::create(dir.path()).unwrap();
        store.insert(&mel("a")).unwrap();
        store.insert(&mel("b")).unwrap();
        store.write_index().unwrap();

        let store = FeatureStore::open(dir.path()).unwrap();
        assert_eq!(store.len(), 2);
        assert!(store.contains("a"));
        let back = store.get("a").unwrap();
        assert_eq!(back, mel("a"));
        assert!(matches!(
            store.get("zzz"),
            Err(DspError::MissingFeature { .. })
        ));
    }
}
