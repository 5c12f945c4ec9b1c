//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, u32 version, u32-length-prefixed JSON config
//! blob, u32 tensor count, then per tensor: u32 name length + name bytes,
//! u8 dtype tag, u32 rank, u32 dims, raw little-endian f32 data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ClassifierModel, ModelConfig};
use crate::tensor::{Dtype, Tensor};

const MAGIC: &[u8; 8] = b"PWCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata carried alongside the architecture config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_checksum: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigBlob {
    model: ModelConfig,
    #[serde(default)]
    meta: CheckpointMeta,
}

pub fn save_checkpoint(
    model: &ClassifierModel<f32>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let blob = serde_json::to_vec(&ConfigBlob {
        model: model.config(),
        meta: meta.clone(),
    })?;
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(Dtype::F32.tag());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.offset + n;
        if end > self.bytes.len() {
            return Err(self.err(format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.offset
            )));
        }
        let slice = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ClassifierModel<f32>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Dependency(format!("checkpoint {} not readable: {e}", path.display()))
    })?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blob_len = r.u32()? as usize;
    let blob: ConfigBlob = serde_json::from_slice(r.take(blob_len)?)?;
    let mut model: ClassifierModel<f32> = blob.model.build(0)?;

    let count = r.u32()? as usize;
    let mut loaded: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| r.err("tensor name is not valid UTF-8"))?;
        let dtype = r.u8()?;
        if Dtype::from_tag(dtype) != Some(Dtype::F32) {
            return Err(r.err(format!("unsupported dtype tag {dtype}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push((name, Tensor::new(shape, data)?));
    }
    if r.offset != bytes.len() {
        return Err(r.err("trailing bytes after tensor records"));
    }

    let mut params = model.parameters_mut();
    if params.len() != loaded.len() {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            message: format!(
                "checkpoint holds {} tensors but model has {} parameters",
                loaded.len(),
                params.len()
            ),
        });
    }
    for (p, (name, value)) in params.iter_mut().zip(loaded) {
        if p.name != name {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                message: format!("expected parameter {}, found {name}", p.name),
            });
        }
        if p.value.shape() != value.shape() {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                message: format!(
                    "parameter {name}: shape {:?} vs model {:?}",
                    value.shape(),
                    p.value.shape()
                ),
            });
        }
        p.value = value;
    }
    Ok((model, blob.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_tiny_vit, TinyViTConfig};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_model() -> ClassifierModel<f32> {
        build_tiny_vit(
            TinyViTConfig {
                image: (3, 8, 8),
                patch_size: 4,
                embed_dim: 16,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                num_classes: 4,
            },
            5,
        )
        .unwrap()
    }

    fn probe_batch() -> Vec<crate::tensor::ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        (0..4)
            .map(|_| Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(0.0..1.0)))
            .collect()
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = CheckpointMeta {
            epochs: Some(3),
            seed: Some(5),
            dataset_checksum: Some("abc".into()),
        };
        save_checkpoint(&model, &meta, &path).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        for img in probe_batch() {
            assert_eq!(
                model.forward_one(&img).unwrap(),
                loaded.forward_one(&img).unwrap()
            );
        }
    }

    #[test]
    fn corrupted_header_is_a_format_error() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &CheckpointMeta::default(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0x55;
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.category(), "format");
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &CheckpointMeta::default(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.category(), "version");
        assert!(err.to_string().contains("99"));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &CheckpointMeta::default(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.category(), "format");
    }
}
