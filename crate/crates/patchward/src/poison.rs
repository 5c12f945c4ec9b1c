//! Trigger construction and training-set poisoning.
//!
//! Masked triggers superimpose a pattern Δ through a mask m:
//! `x∘(1−m) + Δ∘m`, clamped to [0, 1]. The sinusoid family is additive
//! (`x + Δ` with a signed Δ, clamped); its own invariants — perturbation
//! bounded by the amplitude, identical along each column, zero at column
//! zero — cannot be met by a masked encoding with patterns in [0, 1].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerFamily {
    Patch,
    SinglePixel,
    Blend,
    Sinusoid,
}

impl std::fmt::Display for TriggerFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TriggerFamily::Patch => "patch",
            TriggerFamily::SinglePixel => "single_pixel",
            TriggerFamily::Blend => "blend",
            TriggerFamily::Sinusoid => "sinusoid",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// How the trigger combines with an image.
#[derive(Debug, Clone, PartialEq)]
pub enum TriggerPayload {
    /// `x∘(1−m) + Δ∘m`; mask and pattern values in [0, 1].
    Masked { mask: Tensor<f32>, pattern: Tensor<f32> },
    /// `x + Δ` with signed Δ.
    Additive { delta: Tensor<f32> },
}

/// A materialized trigger for one image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub family: TriggerFamily,
    pub target_label: usize,
    pub payload: TriggerPayload,
}

impl TriggerSpec {
    pub fn image_shape(&self) -> &[usize] {
        match &self.payload {
            TriggerPayload::Masked { mask, .. } => mask.shape(),
            TriggerPayload::Additive { delta } => delta.shape(),
        }
    }
}

fn check_image_shape(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "image shape must be C×H×W, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Binary square mask at a corner; the pattern holds `pattern_value`
/// inside the square.
pub fn make_patch_trigger(
    image_shape: &[usize],
    patch_size: usize,
    corner: Corner,
    pattern_value: f32,
    target_label: usize,
) -> Result<TriggerSpec> {
    let (c, h, w) = check_image_shape(image_shape)?;
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(Error::Config(format!(
            "patch size {patch_size} does not fit a {h}×{w} image"
        )));
    }
    let (y0, x0) = match corner {
        Corner::TopLeft => (0, 0),
        Corner::TopRight => (0, w - patch_size),
        Corner::BottomLeft => (h - patch_size, 0),
        Corner::BottomRight => (h - patch_size, w - patch_size),
    };
    let mut mask = Tensor::zeros(image_shape);
    let mut pattern = Tensor::zeros(image_shape);
    for ci in 0..c {
        for y in y0..y0 + patch_size {
            for x in x0..x0 + patch_size {
                mask.set3(ci, y, x, 1.0);
                pattern.set3(ci, y, x, pattern_value);
            }
        }
    }
    Ok(TriggerSpec {
        family: TriggerFamily::Patch,
        target_label,
        payload: TriggerPayload::Masked { mask, pattern },
    })
}

/// Mask with exactly one pixel set (all channels).
pub fn make_single_pixel_trigger(
    image_shape: &[usize],
    position: (usize, usize),
    value: f32,
    target_label: usize,
) -> Result<TriggerSpec> {
    let (c, h, w) = check_image_shape(image_shape)?;
    let (y, x) = position;
    if y >= h || x >= w {
        return Err(Error::Config(format!(
            "pixel position ({y}, {x}) outside {h}×{w} image"
        )));
    }
    let mut mask = Tensor::zeros(image_shape);
    let mut pattern = Tensor::zeros(image_shape);
    for ci in 0..c {
        mask.set3(ci, y, x, 1.0);
        pattern.set3(ci, y, x, value);
    }
    Ok(TriggerSpec {
        family: TriggerFamily::SinglePixel,
        target_label,
        payload: TriggerPayload::Masked { mask, pattern },
    })
}

/// Constant-alpha blend of a whole pattern image.
pub fn make_blend_trigger(
    pattern_image: &Tensor<f32>,
    alpha: f32,
    target_label: usize,
) -> Result<TriggerSpec> {
    check_image_shape(pattern_image.shape())?;
    if alpha <= 0.0 || alpha >= 1.0 {
        return Err(Error::Config(format!(
            "blend alpha must lie strictly inside (0, 1), got {alpha}"
        )));
    }
    if pattern_image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Config("blend pattern values must be in [0, 1]".into()));
    }
    Ok(TriggerSpec {
        family: TriggerFamily::Blend,
        target_label,
        payload: TriggerPayload::Masked {
            mask: Tensor::full(pattern_image.shape(), alpha),
            pattern: pattern_image.clone(),
        },
    })
}

/// Additive vertical-strip trigger: `Δ(i, j) = v·sin(2π·j·f/W)`, the same
/// across rows and channels.
pub fn make_sinusoid_trigger(
    image_shape: &[usize],
    amplitude: f32,
    frequency: u32,
    target_label: usize,
) -> Result<TriggerSpec> {
    let (c, h, w) = check_image_shape(image_shape)?;
    if amplitude <= 0.0 || amplitude > 0.25 {
        return Err(Error::Config(format!(
            "sinusoid amplitude must lie in (0, 0.25], got {amplitude}"
        )));
    }
    if frequency < 1 {
        return Err(Error::Config("sinusoid frequency must be at least 1".into()));
    }
    let mut delta = Tensor::zeros(image_shape);
    for x in 0..w {
        let phase = 2.0 * std::f64::consts::PI * x as f64 * frequency as f64 / w as f64;
        let v = amplitude * phase.sin() as f32;
        for ci in 0..c {
            for y in 0..h {
                delta.set3(ci, y, x, v);
            }
        }
    }
    Ok(TriggerSpec {
        family: TriggerFamily::Sinusoid,
        target_label,
        payload: TriggerPayload::Additive { delta },
    })
}

/// Superimpose a trigger on an image, clamping the result to [0, 1].
/// The input is not mutated.
pub fn apply_trigger<T: Scalar>(x: &Tensor<T>, trigger: &TriggerSpec) -> Result<Tensor<T>> {
    if x.shape() != trigger.image_shape() {
        return Err(Error::Dimension(format!(
            "image shape {:?} does not match trigger shape {:?}",
            x.shape(),
            trigger.image_shape()
        )));
    }
    let one = T::one();
    let zero = T::zero();
    let out = match &trigger.payload {
        TriggerPayload::Masked { mask, pattern } => {
            let mut out = x.clone();
            for i in 0..out.len() {
                let m = T::from_f64(mask.data()[i] as f64);
                let d = T::from_f64(pattern.data()[i] as f64);
                let v = x.data()[i] * (one - m) + d * m;
                out.data_mut()[i] = v.min(one).max(zero);
            }
            out
        }
        TriggerPayload::Additive { delta } => {
            let mut out = x.clone();
            for i in 0..out.len() {
                let v = x.data()[i] + T::from_f64(delta.data()[i] as f64);
                out.data_mut()[i] = v.min(one).max(zero);
            }
            out
        }
    };
    Ok(out)
}

/// Per-sample poisoning provenance. These records exist for evaluation
/// only; the detection path never reads them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonRecord {
    pub sample_id: u64,
    pub original_label: usize,
    pub poisoned: bool,
    pub family: TriggerFamily,
}

/// A labeled dataset whose selected samples carry a trigger and the
/// attacker's target label, plus per-sample provenance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedDataset {
    pub dataset: LabeledDataset,
    pub target_label: usize,
    pub family: TriggerFamily,
    /// True at index i iff sample i was poisoned. Evaluation only.
    pub flags: Vec<bool>,
}

impl PoisonedDataset {
    pub fn poisoned_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Poison ⌊rate·N⌋ samples: superimpose the trigger and flip the label to
/// the target. Selection is uniform without replacement among samples
/// whose true label differs from the target, so attack success stays
/// measurable. Rates above 10% are rejected unless `allow_high_rate`.
pub fn poison_dataset(
    dataset: &LabeledDataset,
    trigger: &TriggerSpec,
    rate: f64,
    seed: u64,
    allow_high_rate: bool,
) -> Result<(PoisonedDataset, Vec<PoisonRecord>)> {
    if rate <= 0.0 {
        return Err(Error::Config(format!("poison rate must be positive, got {rate}")));
    }
    if rate > 0.1 && !allow_high_rate {
        return Err(Error::Config(format!(
            "poison rate {rate} exceeds the 0.1 policy cap (override to allow)"
        )));
    }
    if rate > 1.0 {
        return Err(Error::Config(format!("poison rate {rate} exceeds 1")));
    }
    if trigger.target_label >= dataset.num_classes {
        return Err(Error::Config(format!(
            "target label {} out of range for {} classes",
            trigger.target_label, dataset.num_classes
        )));
    }
    let n = dataset.len();
    let count = (rate * n as f64).floor() as usize;
    let mut poisoned = PoisonedDataset {
        dataset: dataset.clone(),
        target_label: trigger.target_label,
        family: trigger.family,
        flags: vec![false; n],
    };
    if count == 0 {
        log::warn!("poison rate {rate} on {n} samples selects nothing");
        return Ok((poisoned, Vec::new()));
    }
    let eligible: Vec<usize> = (0..n)
        .filter(|&i| dataset.labels[i] != trigger.target_label)
        .collect();
    if count > eligible.len() {
        return Err(Error::Config(format!(
            "cannot poison {count} samples: only {} have a non-target label",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, eligible.len(), count);
    let mut records = Vec::with_capacity(count);
    let mut chosen: Vec<usize> = picks.iter().map(|p| eligible[p]).collect();
    chosen.sort_unstable();
    for &i in &chosen {
        let original = poisoned.dataset.labels[i];
        poisoned.dataset.images[i] = apply_trigger(&poisoned.dataset.images[i], trigger)?;
        poisoned.dataset.labels[i] = trigger.target_label;
        poisoned.flags[i] = true;
        records.push(PoisonRecord {
            sample_id: poisoned.dataset.ids[i],
            original_label: original,
            poisoned: true,
            family: trigger.family,
        });
    }
    Ok((poisoned, records))
}

/// Serializable trigger parameters; materialized per image shape so that
/// attacks are reproducible from config alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TriggerConfig {
    Patch {
        patch_size: usize,
        corner: Corner,
        pattern_value: f32,
        target_label: usize,
    },
    SinglePixel {
        row: usize,
        col: usize,
        value: f32,
        target_label: usize,
    },
    Blend {
        /// Seed for a deterministic uniform-noise pattern image.
        pattern_seed: u64,
        alpha: f32,
        target_label: usize,
    },
    Sinusoid {
        amplitude: f32,
        frequency: u32,
        target_label: usize,
    },
}

/// Versioned trigger description file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerFile {
    pub version: u32,
    #[serde(flatten)]
    pub config: TriggerConfig,
}

pub const TRIGGER_FILE_VERSION: u32 = 1;

impl TriggerConfig {
    pub fn target_label(&self) -> usize {
        match *self {
            TriggerConfig::Patch { target_label, .. }
            | TriggerConfig::SinglePixel { target_label, .. }
            | TriggerConfig::Blend { target_label, .. }
            | TriggerConfig::Sinusoid { target_label, .. } => target_label,
        }
    }

    pub fn family(&self) -> TriggerFamily {
        match self {
            TriggerConfig::Patch { .. } => TriggerFamily::Patch,
            TriggerConfig::SinglePixel { .. } => TriggerFamily::SinglePixel,
            TriggerConfig::Blend { .. } => TriggerFamily::Blend,
            TriggerConfig::Sinusoid { .. } => TriggerFamily::Sinusoid,
        }
    }

    /// Build the concrete trigger tensors for one image shape.
    pub fn materialize(&self, image_shape: &[usize]) -> Result<TriggerSpec> {
        match *self {
            TriggerConfig::Patch {
                patch_size,
                corner,
                pattern_value,
                target_label,
            } => make_patch_trigger(image_shape, patch_size, corner, pattern_value, target_label),
            TriggerConfig::SinglePixel {
                row,
                col,
                value,
                target_label,
            } => make_single_pixel_trigger(image_shape, (row, col), value, target_label),
            TriggerConfig::Blend {
                pattern_seed,
                alpha,
                target_label,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed);
                let pattern = Tensor::from_fn(image_shape, |_| {
                    rand::Rng::random_range(&mut rng, 0.0..1.0)
                });
                make_blend_trigger(&pattern, alpha, target_label)
            }
            TriggerConfig::Sinusoid {
                amplitude,
                frequency,
                target_label,
            } => make_sinusoid_trigger(image_shape, amplitude, frequency, target_label),
        }
    }
}
