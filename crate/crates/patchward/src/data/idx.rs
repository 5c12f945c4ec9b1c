//! IDX image/label file ingestion (big-endian, magic-checked).

use std::fs;
use std::path::Path;

use crate::data::{LabeledDataset, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(format_err(
            path,
            offset as u64,
            format!("truncated file: need 4 bytes, have {}", bytes.len() - offset),
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Load an IDX images file plus its labels file into a dataset of
/// 1×H×W images scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&image_bytes, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(
            images_path,
            0,
            format!("bad images magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"),
        ));
    }
    let count = read_u32_be(&image_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&image_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&image_bytes, 12, images_path)? as usize;
    let expected = 16 + count * rows * cols;
    if image_bytes.len() != expected {
        return Err(format_err(
            images_path,
            image_bytes.len().min(expected) as u64,
            format!(
                "images payload is {} bytes, header implies {}",
                image_bytes.len(),
                expected
            ),
        ));
    }

    let lmagic = read_u32_be(&label_bytes, 0, labels_path)?;
    if lmagic != LABELS_MAGIC {
        return Err(format_err(
            labels_path,
            0,
            format!("bad labels magic 0x{lmagic:08x}, expected 0x{LABELS_MAGIC:08x}"),
        ));
    }
    let lcount = read_u32_be(&label_bytes, 4, labels_path)? as usize;
    if label_bytes.len() != 8 + lcount {
        return Err(format_err(
            labels_path,
            label_bytes.len().min(8 + lcount) as u64,
            format!(
                "labels payload is {} bytes, header implies {}",
                label_bytes.len(),
                8 + lcount
            ),
        ));
    }
    if lcount != count {
        return Err(format_err(
            labels_path,
            4,
            format!("labels file holds {lcount} entries but images file holds {count}"),
        ));
    }

    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let pixels: Vec<f32> = image_bytes[start..start + rows * cols]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        images.push(Tensor::new(vec![1, rows, cols], pixels)?);
    }
    let labels: Vec<usize> = label_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    LabeledDataset::new(images, labels, num_classes, SplitTag::Full)
}

/// Serialize a dataset of single-channel images to IDX byte buffers
/// (images file, labels file). Used by tests and fixtures.
pub fn to_idx_bytes(dataset: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (c, h, w) = dataset.image_shape()?;
    if c != 1 {
        return Err(Error::Input(format!(
            "IDX export supports single-channel images, got {c} channels"
        )));
    }
    let mut images = Vec::with_capacity(16 + dataset.len() * h * w);
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    images.extend_from_slice(&(h as u32).to_be_bytes());
    images.extend_from_slice(&(w as u32).to_be_bytes());
    for img in &dataset.images {
        for &v in img.data() {
            images.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    labels.extend(dataset.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    fn two_image_fixture() -> (Vec<u8>, Vec<u8>) {
        // 2 images of 2×2 with pixels {0, 255}.
        let mut images = Vec::new();
        images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&[0, 255, 255, 0, 255, 0, 0, 255]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[1, 0]);
        (images, labels)
    }

    #[test]
    fn loads_hand_built_fixture() {
        let (img, lbl) = two_image_fixture();
        let fi = write_temp(&img);
        let fl = write_temp(&lbl);
        let ds = load_idx(fi.path(), fl.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images[0].shape(), &[1, 2, 2]);
        assert_eq!(ds.images[0].data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ds.labels, vec![1, 0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let (mut img, lbl) = two_image_fixture();
        img[0] = 0xff;
        let fi = write_temp(&img);
        let fl = write_temp(&lbl);
        let err = load_idx(fi.path(), fl.path()).unwrap_err();
        assert_eq!(err.category(), "format");
        assert!(err.to_string().contains("byte 0"));
    }

    #[test]
    fn rejects_truncated_images() {
        let (img, lbl) = two_image_fixture();
        let fi = write_temp(&img[..img.len() - 3]);
        let fl = write_temp(&lbl);
        let err = load_idx(fi.path(), fl.path()).unwrap_err();
        assert_eq!(err.category(), "format");
    }

    #[test]
    fn rejects_count_mismatch() {
        let (img, mut lbl) = two_image_fixture();
        // claim 3 labels and append one
        lbl[4..8].copy_from_slice(&3u32.to_be_bytes());
        lbl.push(2);
        let fi = write_temp(&img);
        let fl = write_temp(&lbl);
        let err = load_idx(fi.path(), fl.path()).unwrap_err();
        assert_eq!(err.category(), "format");
        assert!(err.to_string().contains('3'));
    }

    #[test]
    fn export_round_trip() {
        let (img, lbl) = two_image_fixture();
        let fi = write_temp(&img);
        let fl = write_temp(&lbl);
        let ds = load_idx(fi.path(), fl.path()).unwrap();
        let (img2, lbl2) = to_idx_bytes(&ds).unwrap();
        assert_eq!(img, img2);
        assert_eq!(lbl, lbl2);
    }
}
