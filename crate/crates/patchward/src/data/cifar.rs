//! CIFAR-10 binary record ingestion.
//!
//! Each record is 1 label byte followed by 3072 pixel bytes laid out as
//! three 32×32 planes in R, G, B order.

use std::fs;
use std::path::Path;

use crate::data::{LabeledDataset, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RECORD_LEN: usize = 1 + 3 * 32 * 32;
const NUM_CLASSES: usize = 10;

/// Load one or more CIFAR-10 binary batch files into a single dataset of
/// 3×32×32 images in [0, 1].
pub fn load_cifar_binary(paths: &[impl AsRef<Path>]) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.is_empty() {
            log::warn!("CIFAR batch {} is empty, skipping", path.display());
            continue;
        }
        if bytes.len() % RECORD_LEN != 0 {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: (bytes.len() - bytes.len() % RECORD_LEN) as u64,
                message: format!(
                    "file length {} is not a multiple of the {RECORD_LEN}-byte record size",
                    bytes.len()
                ),
            });
        }
        for (rec_idx, record) in bytes.chunks_exact(RECORD_LEN).enumerate() {
            let label = record[0] as usize;
            if label >= NUM_CLASSES {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: (rec_idx * RECORD_LEN) as u64,
                    message: format!("label byte {label} exceeds class count {NUM_CLASSES}"),
                });
            }
            let pixels: Vec<f32> = record[1..].iter().map(|&b| b as f32 / 255.0).collect();
            images.push(Tensor::new(vec![3, 32, 32], pixels)?);
            labels.push(label);
        }
    }
    LabeledDataset::new(images, labels, NUM_CLASSES, SplitTag::Full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn single_record_fixture() {
        let mut record = vec![7u8];
        record.extend(std::iter::repeat(255u8).take(3072));
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&record).unwrap();
        let ds = load_cifar_binary(&[f.path()]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 7);
        assert_eq!(ds.images[0].shape(), &[3, 32, 32]);
        assert!(ds.images[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let ds = load_cifar_binary(&[f.path()]).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn partial_record_is_a_format_error() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&vec![0u8; RECORD_LEN + 1]).unwrap();
        let err = load_cifar_binary(&[f.path()]).unwrap_err();
        assert_eq!(err.category(), "format");
    }
}
