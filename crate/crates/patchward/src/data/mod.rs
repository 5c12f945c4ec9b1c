//! Dataset ingestion, synthesis, and split management.
//!
//! All loaders produce C×H×W float images scaled to [0, 1] by x/255, with
//! no mean/std normalization baked in: triggers operate in raw pixel
//! space, so poisoning must happen before any model-side normalization.

mod cifar;
mod idx;
mod store;
mod synthetic;

pub use cifar::load_cifar_binary;
pub use idx::load_idx;
pub use store::{load_dataset, load_splits, save_splits, DatasetManifest, FileEntry};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Full,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Full => "full",
        };
        f.write_str(s)
    }
}

/// Labeled image dataset with stable per-sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: SplitTag,
    pub ids: Vec<u64>,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        num_classes: usize,
        split: SplitTag,
    ) -> Result<Self> {
        let ids = (0..images.len() as u64).collect();
        Self::with_ids(images, labels, num_classes, split, ids)
    }

    pub fn with_ids(
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        num_classes: usize,
        split: SplitTag,
        ids: Vec<u64>,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.len() != ids.len() {
            return Err(Error::Input(format!(
                "{} images, {} labels, {} ids",
                images.len(),
                labels.len(),
                ids.len()
            )));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|img| img.shape() != first.shape()) {
                return Err(Error::Dimension("images have differing shapes".into()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|&&id| !seen.insert(id)) {
            return Err(Error::Input(format!("duplicate sample id {dup}")));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
            split,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Image shape (C, H, W); errors on an empty dataset.
    pub fn image_shape(&self) -> Result<(usize, usize, usize)> {
        let img = self
            .images
            .first()
            .ok_or_else(|| Error::Input("empty dataset has no image shape".into()))?;
        Ok((img.shape()[0], img.shape()[1], img.shape()[2]))
    }

    /// New dataset keeping only the samples at `indices`, preserving ids.
    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Result<LabeledDataset> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("subset index {i} out of range")));
            }
            images.push(self.images[i].clone());
            labels.push(self.labels[i]);
            ids.push(self.ids[i]);
        }
        LabeledDataset::with_ids(images, labels, self.num_classes, split, ids)
    }
}

/// Deterministic shuffle-and-partition into train/val/test.
///
/// `fractions` must sum to 1 within 1e-9. Sizes are floors of the exact
/// fractions with the remainder assigned to the train split.
pub fn split(
    dataset: &LabeledDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let (ft, fv, fs) = fractions;
    if ft < 0.0 || fv < 0.0 || fs < 0.0 {
        return Err(Error::Config("split fractions must be non-negative".into()));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {:?} sum to {}, expected 1",
            fractions,
            ft + fv + fs
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_val = (fv * n as f64).floor() as usize;
    let n_test = (fs * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;

    let train = dataset.subset(&order[..n_train], SplitTag::Train)?;
    let val = dataset.subset(&order[n_train..n_train + n_val], SplitTag::Val)?;
    let test = dataset.subset(&order[n_train + n_val..], SplitTag::Test)?;
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn tiny_dataset(n: usize) -> LabeledDataset {
        let images = (0..n)
            .map(|i| Tensor::full(&[1, 2, 2], i as f32 / n as f32))
            .collect();
        let labels = (0..n).map(|i| i % 3).collect();
        LabeledDataset::new(images, labels, 3, SplitTag::Full).unwrap()
    }

    #[test]
    fn split_all_train_returns_input() {
        let ds = tiny_dataset(10);
        let (train, val, test) = split(&ds, (1.0, 0.0, 0.0), 7).unwrap();
        assert_eq!(train.len(), 10);
        assert!(val.is_empty() && test.is_empty());
        let mut ids = train.ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, ds.ids);
    }

    #[test]
    fn split_sizes_80_10_10() {
        let ds = tiny_dataset(100);
        let (train, val, test) = split(&ds, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (80, 10, 10));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let ds = tiny_dataset(50);
        let a = split(&ds, (0.6, 0.2, 0.2), 99).unwrap();
        let b = split(&ds, (0.6, 0.2, 0.2), 99).unwrap();
        assert_eq!(a.0.ids, b.0.ids);
        assert_eq!(a.1.ids, b.1.ids);
        assert_eq!(a.2.ids, b.2.ids);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = tiny_dataset(10);
        let err = split(&ds, (0.5, 0.2, 0.2), 0).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let images = vec![Tensor::zeros(&[1, 2, 2]); 2];
        let err =
            LabeledDataset::with_ids(images, vec![0, 0], 1, SplitTag::Full, vec![5, 5]).unwrap_err();
        assert_eq!(err.category(), "input");
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_covering(n in 1usize..200, seed in 0u64..1000, a in 0u32..100, b in 0u32..100) {
            let total = 100 + a + b;
            let fractions = (100.0 / total as f64, a as f64 / total as f64, b as f64 / total as f64);
            let ds = tiny_dataset(n);
            let (train, val, test) = split(&ds, fractions, seed).unwrap();
            let mut all: Vec<u64> = train.ids.iter().chain(&val.ids).chain(&test.ids).copied().collect();
            prop_assert_eq!(all.len(), n);
            all.sort_unstable();
            let mut expected = ds.ids.clone();
            expected.sort_unstable();
            prop_assert_eq!(all, expected);
        }
    }
}
