//! Patch-processing backdoor detection and the filter-and-retrain
//! pipeline.
//!
//! Per sample, the detector predicts once on the untouched image, then
//! runs T PatchDrop trials and T PatchShuffle trials, counting prediction
//! flips F_d and F_s. A sample is flagged as backdoor when F_d > k_d or
//! F_s < k_s (strict inequalities; boundary equality means clean).
//! Thresholds come from nearest-rank percentiles of flip counts on clean
//! samples, or from the aggressive no-clean-data profile k_d = 0,
//! k_s = T.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SplitTag};
use crate::error::{Error, Result};
use crate::models::{train, Classifier, ClassifierModel, ModelConfig, TrainConfig};
use crate::patchproc::{apply_trials, PatchGrid, PatchTransformOutcome, TransformSpec};
use crate::poison::PoisonedDataset;
use crate::seed::{derive_seed, derive_seed_indexed};
use crate::tensor::ImageTensor;

/// Flip counts for one sample: how often each transform changed the
/// model's prediction over `trials` trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipCounts {
    pub sample_id: u64,
    pub drop_flips: usize,
    pub shuffle_flips: usize,
    pub trials: usize,
}

/// Detection thresholds: flag when drop_flips > k_d or shuffle_flips < k_s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub k_d: usize,
    pub k_s: usize,
}

/// Full detector configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionProfile {
    pub trials: usize,
    pub drop_grid: PatchGrid,
    pub drop_count: usize,
    pub shuffle_grid: PatchGrid,
    /// Nearest-rank percentile for k_d (large: flips on clean stay low).
    pub drop_percentile: f64,
    /// Nearest-rank percentile for k_s (small: clean samples flip a lot).
    pub shuffle_percentile: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    pub master_seed: u64,
    /// Skip the shuffle suite when the drop rule already fired.
    #[serde(default)]
    pub early_exit: bool,
}

impl DetectionProfile {
    /// Desk-scale default: T = 32 trials, 4×4 grids, drop 4 of 16,
    /// 90th/10th percentile calibration.
    pub fn new(master_seed: u64) -> Self {
        DetectionProfile {
            trials: 32,
            drop_grid: PatchGrid { l: 4 },
            drop_count: 4,
            shuffle_grid: PatchGrid { l: 4 },
            drop_percentile: 90.0,
            shuffle_percentile: 10.0,
            thresholds: None,
            master_seed,
            early_exit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("profile needs at least 1 trial".into()));
        }
        if self.drop_count > self.drop_grid.patches() {
            return Err(Error::Config(format!(
                "cannot drop {} of {} patches",
                self.drop_count,
                self.drop_grid.patches()
            )));
        }
        for p in [self.drop_percentile, self.shuffle_percentile] {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::Config(format!("percentile {p} outside [0, 100]")));
            }
        }
        if let Some(t) = &self.thresholds {
            if t.k_d > self.trials || t.k_s > self.trials {
                return Err(Error::Config(format!(
                    "thresholds {t:?} exceed trial count {}",
                    self.trials
                )));
            }
        }
        Ok(())
    }

    pub fn drop_spec(&self) -> TransformSpec {
        TransformSpec::Drop {
            grid: self.drop_grid,
            count: self.drop_count,
        }
    }

    pub fn shuffle_spec(&self) -> TransformSpec {
        TransformSpec::Shuffle {
            grid: self.shuffle_grid,
        }
    }

    fn require_thresholds(&self) -> Result<Thresholds> {
        self.thresholds.ok_or_else(|| {
            Error::Dependency("detection profile has no thresholds; calibrate first".into())
        })
    }
}

/// The no-clean-data profile of the retraining scenario: k_d = 0 (any
/// drop flip flags backdoor) and k_s = T (any shuffle-stability shortfall
/// flags backdoor).
pub fn no_clean_data_profile(mut base: DetectionProfile) -> Result<DetectionProfile> {
    base.validate()?;
    base.thresholds = Some(Thresholds {
        k_d: 0,
        k_s: base.trials,
    });
    Ok(base)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Clean,
    Backdoor,
}

/// Which rule(s) fired for a backdoor verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiredRule {
    Drop,
    Shuffle,
    Both,
    None,
}

impl std::fmt::Display for FiredRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FiredRule::Drop => "drop",
            FiredRule::Shuffle => "shuffle",
            FiredRule::Both => "both",
            FiredRule::None => "none",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub sample_id: u64,
    pub decision: Decision,
    pub rule: FiredRule,
    pub drop_flips: usize,
    /// Absent when early-exit skipped the shuffle suite.
    pub shuffle_flips: Option<usize>,
    pub k_d: usize,
    pub k_s: usize,
}

/// The decision rule as a pure function of counts and thresholds.
pub fn decide(drop_flips: usize, shuffle_flips: usize, t: Thresholds) -> (Decision, FiredRule) {
    let drop_fired = drop_flips > t.k_d;
    let shuffle_fired = shuffle_flips < t.k_s;
    match (drop_fired, shuffle_fired) {
        (true, true) => (Decision::Backdoor, FiredRule::Both),
        (true, false) => (Decision::Backdoor, FiredRule::Drop),
        (false, true) => (Decision::Backdoor, FiredRule::Shuffle),
        (false, false) => (Decision::Clean, FiredRule::None),
    }
}

/// Per-sample rng seed for a transform suite, derived from the profile's
/// master seed so batch order and threading cannot change the counts.
fn suite_rng(profile: &DetectionProfile, label: &str, sample_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(profile.master_seed, label, sample_id))
}

fn count_flips<C: Classifier + ?Sized>(
    model: &C,
    outcomes: &[PatchTransformOutcome],
    baseline: usize,
) -> Result<usize> {
    let mut flips = 0;
    for outcome in outcomes {
        if model.predict_one(&outcome.image)? != baseline {
            flips += 1;
        }
    }
    Ok(flips)
}

/// Flip counts plus the stored transform outcomes (for replay checks).
pub fn flip_counts_detailed<C: Classifier + ?Sized>(
    model: &C,
    x: &ImageTensor,
    sample_id: u64,
    profile: &DetectionProfile,
) -> Result<(FlipCounts, Vec<PatchTransformOutcome>, Vec<PatchTransformOutcome>)> {
    profile.validate()?;
    let baseline = model.predict_one(x)?;
    let mut drop_rng = suite_rng(profile, "defense/drop", sample_id);
    let drop_outcomes = apply_trials(x, &profile.drop_spec(), profile.trials, &mut drop_rng)?;
    let drop_flips = count_flips(model, &drop_outcomes, baseline)?;
    let mut shuffle_rng = suite_rng(profile, "defense/shuffle", sample_id);
    let shuffle_outcomes =
        apply_trials(x, &profile.shuffle_spec(), profile.trials, &mut shuffle_rng)?;
    let shuffle_flips = count_flips(model, &shuffle_outcomes, baseline)?;
    Ok((
        FlipCounts {
            sample_id,
            drop_flips,
            shuffle_flips,
            trials: profile.trials,
        },
        drop_outcomes,
        shuffle_outcomes,
    ))
}

/// Flip counts for one sample under both transform suites.
pub fn flip_counts<C: Classifier + ?Sized>(
    model: &C,
    x: &ImageTensor,
    sample_id: u64,
    profile: &DetectionProfile,
) -> Result<FlipCounts> {
    Ok(flip_counts_detailed(model, x, sample_id, profile)?.0)
}

/// Nearest-rank percentile: value at 1-based index ⌈n/100·K⌉ of the
/// ascending-sorted sample.
pub fn nearest_rank_percentile(values: &[usize], percentile: f64) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::Calibration("empty sample for percentile".into()));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::Config(format!(
            "percentile {percentile} outside [0, 100]"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let k = sorted.len();
    let rank = ((percentile / 100.0) * k as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, k) - 1])
}

/// Calibrate thresholds from clean samples: k_d at the drop percentile of
/// drop flips, k_s at the shuffle percentile of shuffle flips.
pub fn calibrate<C: Classifier + ?Sized>(
    model: &C,
    clean: &LabeledDataset,
    profile: &DetectionProfile,
) -> Result<DetectionProfile> {
    profile.validate()?;
    if clean.is_empty() {
        return Err(Error::Calibration(
            "no clean samples; use the no-clean-data profile (k_d = 0, k_s = T) instead".into(),
        ));
    }
    let counts = flip_counts_batch(model, clean, profile)?;
    let drop: Vec<usize> = counts.iter().map(|c| c.drop_flips).collect();
    let shuffle: Vec<usize> = counts.iter().map(|c| c.shuffle_flips).collect();
    let mut calibrated = profile.clone();
    calibrated.thresholds = Some(Thresholds {
        k_d: nearest_rank_percentile(&drop, profile.drop_percentile)?,
        k_s: nearest_rank_percentile(&shuffle, profile.shuffle_percentile)?,
    });
    Ok(calibrated)
}

/// Flip counts for every sample of a dataset, in dataset order. Runs on
/// the rayon pool; per-sample seeds make the result independent of
/// scheduling.
pub fn flip_counts_batch<C: Classifier + ?Sized>(
    model: &C,
    data: &LabeledDataset,
    profile: &DetectionProfile,
) -> Result<Vec<FlipCounts>> {
    profile.validate()?;
    data.images
        .par_iter()
        .zip(data.ids.par_iter())
        .map(|(img, &id)| flip_counts(model, img, id, profile))
        .collect()
}

/// Classify one sample as clean or backdoor.
pub fn detect<C: Classifier + ?Sized>(
    model: &C,
    x: &ImageTensor,
    sample_id: u64,
    profile: &DetectionProfile,
) -> Result<Verdict> {
    profile.validate()?;
    let thresholds = profile.require_thresholds()?;
    if profile.early_exit {
        let baseline = model.predict_one(x)?;
        let mut drop_rng = suite_rng(profile, "defense/drop", sample_id);
        let drop_outcomes = apply_trials(x, &profile.drop_spec(), profile.trials, &mut drop_rng)?;
        let drop_flips = count_flips(model, &drop_outcomes, baseline)?;
        if drop_flips > thresholds.k_d {
            return Ok(Verdict {
                sample_id,
                decision: Decision::Backdoor,
                rule: FiredRule::Drop,
                drop_flips,
                shuffle_flips: None,
                k_d: thresholds.k_d,
                k_s: thresholds.k_s,
            });
        }
        let mut shuffle_rng = suite_rng(profile, "defense/shuffle", sample_id);
        let shuffle_outcomes =
            apply_trials(x, &profile.shuffle_spec(), profile.trials, &mut shuffle_rng)?;
        let shuffle_flips = count_flips(model, &shuffle_outcomes, baseline)?;
        let (decision, rule) = decide(drop_flips, shuffle_flips, thresholds);
        return Ok(Verdict {
            sample_id,
            decision,
            rule,
            drop_flips,
            shuffle_flips: Some(shuffle_flips),
            k_d: thresholds.k_d,
            k_s: thresholds.k_s,
        });
    }
    let counts = flip_counts(model, x, sample_id, profile)?;
    Ok(verdict_from_counts(&counts, thresholds))
}

/// Apply the decision rule to precomputed counts.
pub fn verdict_from_counts(counts: &FlipCounts, thresholds: Thresholds) -> Verdict {
    let (decision, rule) = decide(counts.drop_flips, counts.shuffle_flips, thresholds);
    Verdict {
        sample_id: counts.sample_id,
        decision,
        rule,
        drop_flips: counts.drop_flips,
        shuffle_flips: Some(counts.shuffle_flips),
        k_d: thresholds.k_d,
        k_s: thresholds.k_s,
    }
}

/// Detect over a whole dataset, in dataset order.
pub fn detect_batch<C: Classifier + ?Sized>(
    model: &C,
    data: &LabeledDataset,
    profile: &DetectionProfile,
) -> Result<Vec<Verdict>> {
    profile.validate()?;
    let thresholds = profile.require_thresholds()?;
    if profile.early_exit {
        return data
            .images
            .par_iter()
            .zip(data.ids.par_iter())
            .map(|(img, &id)| detect(model, img, id, profile))
            .collect();
    }
    let counts = flip_counts_batch(model, data, profile)?;
    Ok(counts
        .iter()
        .map(|c| verdict_from_counts(c, thresholds))
        .collect())
}

/// Split a dataset into kept (clean-judged) and flagged samples.
/// Errors when the filter degenerates to flagging everything.
pub fn filter_samples<C: Classifier + ?Sized>(
    model: &C,
    data: &LabeledDataset,
    profile: &DetectionProfile,
) -> Result<(Vec<usize>, Vec<Verdict>)> {
    let verdicts = detect_batch(model, data, profile)?;
    let kept: Vec<usize> = verdicts
        .iter()
        .enumerate()
        .filter(|(_, v)| v.decision == Decision::Clean)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(Error::Pipeline(format!(
            "degenerate filter: all {} samples flagged as backdoor",
            data.len()
        )));
    }
    Ok((kept, verdicts))
}

/// Bookkeeping of one filter-and-retrain run. Ground-truth columns are
/// present only when provenance flags were supplied, and are used for
/// reporting alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemovalReport {
    pub total_samples: usize,
    pub flagged: usize,
    pub remaining: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed_poisoned: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed_clean: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surviving_poisoned: Option<usize>,
}

pub struct FilterRetrainOutcome {
    pub bootstrap_model: ClassifierModel<f32>,
    pub retrained_model: ClassifierModel<f32>,
    pub filtered: LabeledDataset,
    pub verdicts: Vec<Verdict>,
    pub report: RemovalReport,
}

/// Training-data cleansing: (i) bootstrap-train on the possibly poisoned
/// set, (ii) detect every training sample with the given (typically
/// no-clean-data) profile, (iii) drop flagged samples and retrain from
/// scratch on the remainder.
///
/// `ground_truth` provenance flags, when available, fill the report's
/// evaluation columns; they never influence filtering.
pub fn filter_retrain(
    training_set: &PoisonedDataset,
    model_config: &ModelConfig,
    bootstrap_epochs: usize,
    bootstrap_train: &TrainConfig,
    retrain: &TrainConfig,
    profile: &DetectionProfile,
    seed: u64,
    use_ground_truth_in_report: bool,
) -> Result<FilterRetrainOutcome> {
    if training_set.dataset.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    profile.require_thresholds()?;

    let mut bootstrap_model: ClassifierModel<f32> =
        model_config.build(derive_seed(seed, "filter_retrain/bootstrap_init"))?;
    let bootstrap_cfg = TrainConfig {
        epochs: bootstrap_epochs,
        seed: derive_seed(seed, "filter_retrain/bootstrap_train"),
        ..*bootstrap_train
    };
    train(&mut bootstrap_model, &training_set.dataset, &bootstrap_cfg, None)?;

    let (kept, verdicts) = filter_samples(&bootstrap_model, &training_set.dataset, profile)?;
    let filtered = training_set.dataset.subset(&kept, SplitTag::Train)?;

    let flagged = training_set.dataset.len() - kept.len();
    let mut report = RemovalReport {
        total_samples: training_set.dataset.len(),
        flagged,
        remaining: kept.len(),
        removed_poisoned: None,
        removed_clean: None,
        surviving_poisoned: None,
    };
    if use_ground_truth_in_report {
        let mut removed_poisoned = 0;
        let mut removed_clean = 0;
        let mut surviving_poisoned = 0;
        let kept_set: std::collections::HashSet<usize> = kept.iter().copied().collect();
        for (i, &is_poisoned) in training_set.flags.iter().enumerate() {
            if kept_set.contains(&i) {
                if is_poisoned {
                    surviving_poisoned += 1;
                }
            } else if is_poisoned {
                removed_poisoned += 1;
            } else {
                removed_clean += 1;
            }
        }
        report.removed_poisoned = Some(removed_poisoned);
        report.removed_clean = Some(removed_clean);
        report.surviving_poisoned = Some(surviving_poisoned);
    }

    let mut retrained_model: ClassifierModel<f32> =
        model_config.build(derive_seed(seed, "filter_retrain/retrain_init"))?;
    let retrain_cfg = TrainConfig {
        seed: derive_seed(seed, "filter_retrain/retrain_train"),
        ..*retrain
    };
    train(&mut retrained_model, &filtered, &retrain_cfg, None)?;

    Ok(FilterRetrainOutcome {
        bootstrap_model,
        retrained_model,
        filtered,
        verdicts,
        report,
    })
}
