//! Input-space patch transformations: PatchDrop and PatchShuffle.
//!
//! Images are divided into an l×l spatial grid of L = l² patches,
//! independent of any model's embedding patch size. When l does not
//! divide the image side, the image is padded by edge replication to the
//! next multiple, transformed, and cropped back.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor};

/// Fill value written into dropped patches.
pub const DROP_FILL: f32 = 0.0;

/// An l×l spatial grid over an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub l: usize,
}

impl PatchGrid {
    pub fn new(l: usize) -> Result<Self> {
        if l == 0 {
            return Err(Error::Config("patch grid side must be positive".into()));
        }
        Ok(PatchGrid { l })
    }

    /// Total patch count L = l².
    pub fn patches(&self) -> usize {
        self.l * self.l
    }
}

/// The randomness a transform actually applied; replaying it reproduces
/// the output bitwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformDescriptor {
    /// Indices (row-major over the grid) of dropped patches.
    Dropped(Vec<usize>),
    /// Permutation applied to the patches: output patch i holds input
    /// patch `perm[i]`.
    Permuted(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchTransformOutcome {
    pub image: ImageTensor,
    pub descriptor: TransformDescriptor,
}

/// Pad an image by edge replication so both spatial dims are multiples of
/// `l`; returns the padded image and the original size.
fn pad_to_multiple(x: &ImageTensor, l: usize) -> (ImageTensor, usize, usize) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ph = h.div_ceil(l) * l;
    let pw = w.div_ceil(l) * l;
    if ph == h && pw == w {
        return (x.clone(), h, w);
    }
    let mut out = Tensor::zeros(&[c, ph, pw]);
    for ci in 0..c {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for xx in 0..pw {
                let sx = xx.min(w - 1);
                out.set3(ci, y, xx, x.at3(ci, sy, sx));
            }
        }
    }
    (out, h, w)
}

fn crop(x: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    let c = x.shape()[0];
    if x.shape()[1] == h && x.shape()[2] == w {
        return x.clone();
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out.set3(ci, y, xx, x.at3(ci, y, xx));
            }
        }
    }
    out
}

fn patch_bounds(grid: PatchGrid, padded_h: usize, padded_w: usize, idx: usize) -> (usize, usize, usize, usize) {
    let (py, px) = (idx / grid.l, idx % grid.l);
    let (ch, cw) = (padded_h / grid.l, padded_w / grid.l);
    (py * ch, px * cw, ch, cw)
}

/// Set `count` distinct patches (uniform without replacement) to the fill
/// value; all other pixels are untouched.
pub fn patch_drop(
    x: &ImageTensor,
    grid: PatchGrid,
    count: usize,
    rng: &mut impl RngCore,
) -> Result<PatchTransformOutcome> {
    let total = grid.patches();
    if count > total {
        return Err(Error::Config(format!(
            "cannot drop {count} of {total} patches"
        )));
    }
    let mut dropped: Vec<usize> = sample(rng, total, count).into_iter().collect();
    dropped.sort_unstable();
    let image = apply_drop(x, grid, &dropped)?;
    Ok(PatchTransformOutcome {
        image,
        descriptor: TransformDescriptor::Dropped(dropped),
    })
}

/// Replay a drop descriptor.
pub fn apply_drop(x: &ImageTensor, grid: PatchGrid, dropped: &[usize]) -> Result<ImageTensor> {
    let total = grid.patches();
    if let Some(&bad) = dropped.iter().find(|&&i| i >= total) {
        return Err(Error::Config(format!(
            "patch index {bad} out of range for grid of {total}"
        )));
    }
    let (mut padded, h, w) = pad_to_multiple(x, grid.l);
    let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
    let c = padded.shape()[0];
    for &idx in dropped {
        let (y0, x0, ch, cw) = patch_bounds(grid, ph, pw, idx);
        for ci in 0..c {
            for y in y0..y0 + ch {
                for xx in x0..x0 + cw {
                    padded.set3(ci, y, xx, DROP_FILL);
                }
            }
        }
    }
    Ok(crop(&padded, h, w))
}

/// Permute the L patches by a uniform random permutation.
pub fn patch_shuffle(
    x: &ImageTensor,
    grid: PatchGrid,
    rng: &mut impl RngCore,
) -> Result<PatchTransformOutcome> {
    let mut perm: Vec<usize> = (0..grid.patches()).collect();
    perm.shuffle(rng);
    let image = apply_permutation(x, grid, &perm)?;
    Ok(PatchTransformOutcome {
        image,
        descriptor: TransformDescriptor::Permuted(perm),
    })
}

/// Replay a permutation descriptor: output patch i holds input patch
/// `perm[i]`.
pub fn apply_permutation(x: &ImageTensor, grid: PatchGrid, perm: &[usize]) -> Result<ImageTensor> {
    let total = grid.patches();
    if perm.len() != total {
        return Err(Error::Config(format!(
            "permutation length {} does not match grid of {total}",
            perm.len()
        )));
    }
    let mut seen = vec![false; total];
    for &p in perm {
        if p >= total || seen[p] {
            return Err(Error::Config("not a permutation of the patch grid".into()));
        }
        seen[p] = true;
    }
    let (padded, h, w) = pad_to_multiple(x, grid.l);
    let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
    let c = padded.shape()[0];
    let mut out = Tensor::zeros(&[c, ph, pw]);
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx, ch, cw) = patch_bounds(grid, ph, pw, dst);
        let (sy, sx, _, _) = patch_bounds(grid, ph, pw, src);
        for ci in 0..c {
            for y in 0..ch {
                for xx in 0..cw {
                    out.set3(ci, dy + y, dx + xx, padded.at3(ci, sy + y, sx + xx));
                }
            }
        }
    }
    Ok(crop(&out, h, w))
}

/// Replay any stored descriptor.
pub fn apply_descriptor(
    x: &ImageTensor,
    grid: PatchGrid,
    descriptor: &TransformDescriptor,
) -> Result<ImageTensor> {
    match descriptor {
        TransformDescriptor::Dropped(d) => apply_drop(x, grid, d),
        TransformDescriptor::Permuted(p) => apply_permutation(x, grid, p),
    }
}

/// Which transform a trial sequence applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    Drop { grid: PatchGrid, count: usize },
    Shuffle { grid: PatchGrid },
}

impl TransformSpec {
    pub fn grid(&self) -> PatchGrid {
        match *self {
            TransformSpec::Drop { grid, .. } => grid,
            TransformSpec::Shuffle { grid } => grid,
        }
    }
}

/// Run `trials` independent draws of a transform. Each trial gets its own
/// rng stream derived from the master rng, so a stored outcome list is
/// reproducible and trials are independent of scheduling.
pub fn apply_trials(
    x: &ImageTensor,
    spec: &TransformSpec,
    trials: usize,
    master: &mut impl RngCore,
) -> Result<Vec<PatchTransformOutcome>> {
    if trials == 0 {
        return Err(Error::Config("trial count must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..trials).map(|_| master.next_u64()).collect();
    seeds
        .into_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match *spec {
                TransformSpec::Drop { grid, count } => patch_drop(x, grid, count, &mut rng),
                TransformSpec::Shuffle { grid } => patch_shuffle(x, grid, &mut rng),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(seed: u64, shape: &[usize]) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Strictly positive so the 0.0 fill is always a visible change.
        Tensor::from_fn(shape, |_| rng.random_range(0.01..1.0))
    }

    #[test]
    fn drop_zero_patches_is_identity() {
        let x = rand_image(1, &[3, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = patch_drop(&x, PatchGrid::new(4).unwrap(), 0, &mut rng).unwrap();
        assert_eq!(out.image, x);
        assert_eq!(out.descriptor, TransformDescriptor::Dropped(vec![]));
    }

    #[test]
    fn drop_all_patches_fills_image() {
        let x = rand_image(3, &[3, 16, 16]);
        let grid = PatchGrid::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = patch_drop(&x, grid, grid.patches(), &mut rng).unwrap();
        assert!(out.image.data().iter().all(|&v| v == DROP_FILL));
    }

    #[test]
    fn drop_changes_exactly_the_dropped_pixels() {
        let x = rand_image(5, &[3, 16, 16]);
        let grid = PatchGrid::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = patch_drop(&x, grid, 6, &mut rng).unwrap();
        let per_channel_expected = 6 * (16 / 8) * (16 / 8);
        for c in 0..3 {
            let changed = (0..16 * 16)
                .filter(|i| {
                    let (y, xx) = (i / 16, i % 16);
                    x.at3(c, y, xx) != out.image.at3(c, y, xx)
                })
                .count();
            assert_eq!(changed, per_channel_expected);
        }
        // and the changed pixels hold the fill value
        let TransformDescriptor::Dropped(dropped) = &out.descriptor else {
            panic!();
        };
        assert_eq!(dropped.len(), 6);
    }

    #[test]
    fn drop_count_out_of_range() {
        let x = rand_image(7, &[1, 8, 8]);
        let grid = PatchGrid::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(
            patch_drop(&x, grid, 5, &mut rng).unwrap_err().category(),
            "config"
        );
    }

    #[test]
    fn identity_permutation_is_identity() {
        let x = rand_image(9, &[3, 16, 16]);
        let grid = PatchGrid::new(4).unwrap();
        let perm: Vec<usize> = (0..16).collect();
        assert_eq!(apply_permutation(&x, grid, &perm).unwrap(), x);
    }

    fn patch_bytes(x: &ImageTensor, grid: PatchGrid) -> Vec<Vec<u8>> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ch, cw) = (h / grid.l, w / grid.l);
        let mut patches = Vec::new();
        for idx in 0..grid.patches() {
            let (y0, x0, _, _) = patch_bounds(grid, h, w, idx);
            let mut bytes = Vec::new();
            for ci in 0..c {
                for y in y0..y0 + ch {
                    for xx in x0..x0 + cw {
                        bytes.extend_from_slice(&x.at3(ci, y, xx).to_le_bytes());
                    }
                }
            }
            patches.push(bytes);
        }
        patches
    }

    #[test]
    fn shuffle_preserves_patch_multiset() {
        let x = rand_image(10, &[3, 16, 16]);
        let grid = PatchGrid::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = patch_shuffle(&x, grid, &mut rng).unwrap();
        let mut before = patch_bytes(&x, grid);
        let mut after = patch_bytes(&out.image, grid);
        before.sort();
        after.sort();
        assert_eq!(before, after);
    }

    #[test]
    fn shuffle_preserves_pixel_histogram() {
        let x = rand_image(12, &[3, 16, 16]);
        let grid = PatchGrid::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let out = patch_shuffle(&x, grid, &mut rng).unwrap();
        let mut before: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let mut after: Vec<u32> = out.image.data().iter().map(|v| v.to_bits()).collect();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
    }

    #[test]
    fn replay_reproduces_output_bitwise() {
        let x = rand_image(14, &[3, 16, 16]);
        let grid = PatchGrid::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let dropped = patch_drop(&x, grid, 5, &mut rng).unwrap();
        assert_eq!(
            apply_descriptor(&x, grid, &dropped.descriptor).unwrap(),
            dropped.image
        );
        let shuffled = patch_shuffle(&x, grid, &mut rng).unwrap();
        assert_eq!(
            apply_descriptor(&x, grid, &shuffled.descriptor).unwrap(),
            shuffled.image
        );
    }

    #[test]
    fn trials_are_seed_deterministic() {
        let x = rand_image(16, &[3, 16, 16]);
        let spec = TransformSpec::Drop {
            grid: PatchGrid::new(4).unwrap(),
            count: 4,
        };
        let mut rng1 = ChaCha8Rng::seed_from_u64(17);
        let mut rng2 = ChaCha8Rng::seed_from_u64(17);
        let a = apply_trials(&x, &spec, 8, &mut rng1).unwrap();
        let b = apply_trials(&x, &spec, 8, &mut rng2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_trial_works() {
        let x = rand_image(18, &[3, 16, 16]);
        let spec = TransformSpec::Shuffle {
            grid: PatchGrid::new(4).unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let out = apply_trials(&x, &spec, 1, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
    }

    /// Monte-Carlo check that independent drop trials have the overlap a
    /// hypergeometric draw predicts: two 6-subsets of 64 patches share
    /// 6·6/64 = 0.5625 patches on average.
    #[test]
    fn drop_trial_overlap_matches_hypergeometric() {
        let x = rand_image(20, &[1, 16, 16]);
        let grid = PatchGrid::new(8).unwrap();
        let spec = TransformSpec::Drop { grid, count: 6 };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let runs = 1000;
        let mut total_overlap = 0usize;
        for _ in 0..runs {
            let trials = apply_trials(&x, &spec, 2, &mut rng).unwrap();
            let (TransformDescriptor::Dropped(a), TransformDescriptor::Dropped(b)) =
                (&trials[0].descriptor, &trials[1].descriptor)
            else {
                panic!();
            };
            assert_eq!(a.len(), 6);
            total_overlap += a.iter().filter(|i| b.contains(i)).count();
        }
        let mean = total_overlap as f64 / runs as f64;
        // E = 0.5625, Var = 6·(6/64)·(58/64)·(58/63) ≈ 0.4694
        let expected = 6.0 * 6.0 / 64.0;
        let var = 6.0 * (6.0 / 64.0) * (58.0 / 64.0) * (58.0 / 63.0);
        let three_sigma = 3.0 * (var / runs as f64).sqrt();
        assert!(
            (mean - expected).abs() <= three_sigma,
            "mean overlap {mean}, expected {expected} ± {three_sigma}"
        );
    }

    #[test]
    fn non_dividing_grid_pads_and_crops() {
        let x = rand_image(22, &[3, 10, 10]);
        let grid = PatchGrid::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let out = patch_drop(&x, grid, 0, &mut rng).unwrap();
        assert_eq!(out.image, x);
        let shuffled = patch_shuffle(&x, grid, &mut rng).unwrap();
        assert_eq!(shuffled.image.shape(), x.shape());
    }

    /// Transforms commute with channel permutation.
    #[test]
    fn channel_permutation_equivariance() {
        let x = rand_image(24, &[3, 16, 16]);
        let grid = PatchGrid::new(4).unwrap();
        let swap_channels = |img: &ImageTensor| {
            let mut out = img.clone();
            for y in 0..16 {
                for xx in 0..16 {
                    out.set3(0, y, xx, img.at3(2, y, xx));
                    out.set3(2, y, xx, img.at3(0, y, xx));
                }
            }
            out
        };
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let out = patch_drop(&x, grid, 5, &mut rng).unwrap();
        let transformed_then_swapped = swap_channels(&out.image);
        let swapped_then_transformed =
            apply_descriptor(&swap_channels(&x), grid, &out.descriptor).unwrap();
        assert_eq!(transformed_then_swapped, swapped_then_transformed);
    }
}
