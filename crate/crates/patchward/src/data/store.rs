//! Native on-disk dataset container and checksummed manifest.
//!
//! Images are stored as raw little-endian f32 so poisoned pixel values
//! survive a round trip exactly. The manifest is a versioned JSON file
//! with one SHA-256 checksum per data file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LabeledDataset, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PWDATA01";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub role: String,
    pub file: String,
    pub sha256: String,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub source: String,
    pub files: Vec<FileEntry>,
    /// Per-channel constants applied at model input, not baked into storage.
    pub normalization_mean: Vec<f32>,
    pub normalization_std: Vec<f32>,
    pub total_samples: usize,
    /// Generation seed, synthetic datasets only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn split_sizes_sum(&self) -> usize {
        self.files.iter().map(|f| f.samples).sum()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_dataset(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let (c, h, w) = if ds.is_empty() {
        (0, 0, 0)
    } else {
        ds.image_shape()?
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    for i in 0..ds.len() {
        out.extend_from_slice(&ds.ids[i].to_le_bytes());
        out.extend_from_slice(&(ds.labels[i] as u32).to_le_bytes());
        for &v in ds.images[i].data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_dataset(bytes: &[u8], path: &Path, split: SplitTag) -> Result<LabeledDataset> {
    let err = |offset: usize, message: String| Error::Format {
        path: path.display().to_string(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(err(0, "bad dataset magic".into()));
    }
    let read_u32 = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
            .ok_or_else(|| err(offset, "truncated header".into()))
    };
    let count = read_u32(8)? as usize;
    let c = read_u32(12)? as usize;
    let h = read_u32(16)? as usize;
    let w = read_u32(20)? as usize;
    let num_classes = read_u32(24)? as usize;
    let pixels = c * h * w;
    let record = 8 + 4 + pixels * 4;
    let expected = 28 + count * record;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!("file is {} bytes, header implies {}", bytes.len(), expected),
        ));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut ids = Vec::with_capacity(count);
    let mut offset = 28;
    for _ in 0..count {
        let id = u64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
        let label = u32::from_le_bytes(bytes[offset + 8..offset + 12].try_into().unwrap()) as usize;
        offset += 12;
        let mut data = Vec::with_capacity(pixels);
        for p in 0..pixels {
            let at = offset + p * 4;
            data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
        }
        offset += pixels * 4;
        images.push(Tensor::new(vec![c, h, w], data)?);
        labels.push(label);
        ids.push(id);
    }
    LabeledDataset::with_ids(images, labels, num_classes, split, ids)
}

/// Write train/val/test splits plus a checksummed manifest into `dir`.
pub fn save_splits(
    dir: &Path,
    source: &str,
    splits: &[(&str, &LabeledDataset)],
    seed: Option<u64>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut total = 0usize;
    for (role, ds) in splits {
        let file = format!("{role}.pwd");
        let bytes = encode_dataset(ds)?;
        fs::write(dir.join(&file), &bytes)?;
        files.push(FileEntry {
            role: role.to_string(),
            file,
            sha256: sha256_hex(&bytes),
            samples: ds.len(),
        });
        total += ds.len();
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        source: source.to_string(),
        files,
        normalization_mean: vec![0.0],
        normalization_std: vec![1.0],
        total_samples: total,
        seed,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn role_to_tag(role: &str) -> SplitTag {
    match role {
        "train" => SplitTag::Train,
        "val" => SplitTag::Val,
        "test" => SplitTag::Test,
        _ => SplitTag::Full,
    }
}

/// Load one dataset file referenced by the manifest in `dir`, verifying
/// its checksum.
pub fn load_dataset(dir: &Path, role: &str) -> Result<LabeledDataset> {
    let manifest = read_manifest(dir)?;
    let entry = manifest
        .files
        .iter()
        .find(|f| f.role == role)
        .ok_or_else(|| Error::Input(format!("manifest has no '{role}' split")))?;
    load_entry(dir, entry)
}

/// Load every split referenced by the manifest in `dir`.
pub fn load_splits(dir: &Path) -> Result<Vec<(String, LabeledDataset)>> {
    let manifest = read_manifest(dir)?;
    if manifest.split_sizes_sum() != manifest.total_samples {
        return Err(Error::Format {
            path: manifest_path(dir).display().to_string(),
            offset: 0,
            message: format!(
                "split sizes sum to {} but manifest claims {} samples",
                manifest.split_sizes_sum(),
                manifest.total_samples
            ),
        });
    }
    manifest
        .files
        .iter()
        .map(|entry| Ok((entry.role.clone(), load_entry(dir, entry)?)))
        .collect()
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(dir);
    let bytes = fs::read(&path).map_err(|e| {
        Error::Dependency(format!("dataset manifest {} not readable: {e}", path.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    Ok(manifest)
}

fn load_entry(dir: &Path, entry: &FileEntry) -> Result<LabeledDataset> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path)?;
    let checksum = sha256_hex(&bytes);
    if checksum != entry.sha256 {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            message: format!(
                "checksum mismatch: manifest says {}, file hashes to {checksum}",
                entry.sha256
            ),
        });
    }
    let ds = decode_dataset(&bytes, &path, role_to_tag(&entry.role))?;
    if ds.len() != entry.samples {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            message: format!(
                "manifest says {} samples, file holds {}",
                entry.samples,
                ds.len()
            ),
        });
    }
    Ok(ds)
}
