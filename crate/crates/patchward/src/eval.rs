//! Metrics and sweep experiments: clean accuracy, attack success rate,
//! TPR/TNR, per-transform sweeps, and the CSV report format.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::defense::{Decision, FlipCounts, Verdict};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::patchproc::{apply_trials, PatchGrid, TransformSpec};
use crate::poison::{apply_trigger, TriggerSpec};
use crate::seed::derive_seed_indexed;

/// One experiment measurement row. Optional rates stay empty in the CSV
/// when undefined (e.g., TPR with zero poisoned samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment_id: String,
    pub model: String,
    pub attack: String,
    pub transform: String,
    pub param: f64,
    pub seed: u64,
    pub clean_acc: f64,
    pub asr: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub n_clean: usize,
    pub n_backdoor: usize,
    pub fd_mean: Option<f64>,
    pub fd_var: Option<f64>,
    pub fs_mean: Option<f64>,
    pub fs_var: Option<f64>,
}

impl MetricsRecord {
    pub fn new(experiment_id: &str, model: &str, attack: &str) -> Self {
        MetricsRecord {
            experiment_id: experiment_id.to_string(),
            model: model.to_string(),
            attack: attack.to_string(),
            transform: "none".to_string(),
            param: 0.0,
            seed: 0,
            clean_acc: 0.0,
            asr: None,
            tpr: None,
            tnr: None,
            n_clean: 0,
            n_backdoor: 0,
            fd_mean: None,
            fd_var: None,
            fs_mean: None,
            fs_var: None,
        }
    }
}

/// Fraction of correct predictions on a test set.
pub fn clean_accuracy<C: Classifier + ?Sized>(model: &C, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("accuracy of an empty set is undefined".into()));
    }
    let correct: usize = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(img, &label)| Ok(usize::from(model.predict_one(img)? == label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / data.len() as f64)
}

/// Attack success rate: apply the trigger to every sample whose true
/// label differs from the target, and report the fraction predicted as
/// the target. Target-label samples never enter the denominator.
pub fn attack_success_rate<C: Classifier + ?Sized>(
    model: &C,
    data: &LabeledDataset,
    trigger: &TriggerSpec,
) -> Result<f64> {
    let eligible: Vec<&crate::tensor::ImageTensor> = data
        .images
        .iter()
        .zip(&data.labels)
        .filter(|(_, &label)| label != trigger.target_label)
        .map(|(img, _)| img)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Input(
            "every sample carries the target label; ASR undefined".into(),
        ));
    }
    let hits: usize = eligible
        .par_iter()
        .map(|img| {
            let triggered = apply_trigger(img, trigger)?;
            Ok(usize::from(model.predict_one(&triggered)? == trigger.target_label))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / eligible.len() as f64)
}

/// TPR and TNR of verdicts against ground-truth poison flags.
/// A rate with an empty denominator is reported as `None`, not 0.
pub fn tpr_tnr(verdicts: &[Verdict], poisoned: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    if verdicts.len() != poisoned.len() {
        return Err(Error::Input(format!(
            "{} verdicts but {} ground-truth flags",
            verdicts.len(),
            poisoned.len()
        )));
    }
    let mut true_pos = 0usize;
    let mut pos = 0usize;
    let mut true_neg = 0usize;
    let mut neg = 0usize;
    for (v, &is_poisoned) in verdicts.iter().zip(poisoned) {
        let flagged = v.decision == Decision::Backdoor;
        if is_poisoned {
            pos += 1;
            if flagged {
                true_pos += 1;
            }
        } else {
            neg += 1;
            if !flagged {
                true_neg += 1;
            }
        }
    }
    let tpr = (pos > 0).then(|| true_pos as f64 / pos as f64);
    let tnr = (neg > 0).then(|| true_neg as f64 / neg as f64);
    Ok((tpr, tnr))
}

/// Mean and population variance of flip counts, for the report columns.
pub fn flip_count_stats(counts: &[FlipCounts]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    if counts.is_empty() {
        return (None, None, None, None);
    }
    let n = counts.len() as f64;
    let fd_mean = counts.iter().map(|c| c.drop_flips as f64).sum::<f64>() / n;
    let fs_mean = counts.iter().map(|c| c.shuffle_flips as f64).sum::<f64>() / n;
    let fd_var = counts
        .iter()
        .map(|c| (c.drop_flips as f64 - fd_mean).powi(2))
        .sum::<f64>()
        / n;
    let fs_var = counts
        .iter()
        .map(|c| (c.shuffle_flips as f64 - fs_mean).powi(2))
        .sum::<f64>()
        / n;
    (Some(fd_mean), Some(fd_var), Some(fs_mean), Some(fs_var))
}

fn transformed_accuracy<C: Classifier + ?Sized>(
    model: &C,
    data: &LabeledDataset,
    spec: &TransformSpec,
    seed: u64,
    check: impl Fn(usize, usize) -> bool + Sync,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let hits: usize = data
        .images
        .par_iter()
        .enumerate()
        .zip(data.labels.par_iter())
        .map(|((i, img), &label)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "sweep/trial", i as u64));
            let outcome = apply_trials(img, spec, 1, &mut rng)?;
            let pred = model.predict_one(&outcome[0].image)?;
            Ok(usize::from(check(pred, label)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / data.len() as f64)
}

/// Accuracy/ASR sweep over PatchDrop counts. For each (M, seed) cell,
/// every test image gets one independent drop draw; clean accuracy is
/// measured on `clean_test` and ASR on trigger-applied copies of it.
pub fn sweep_drop<C: Classifier + ?Sized>(
    model: &C,
    model_tag: &str,
    clean_test: &LabeledDataset,
    trigger: &TriggerSpec,
    grid: PatchGrid,
    drop_counts: &[usize],
    seeds: &[u64],
    experiment_id: &str,
) -> Result<Vec<MetricsRecord>> {
    let triggered = triggered_view(clean_test, trigger)?;
    let mut records = Vec::new();
    for &m in drop_counts {
        for &seed in seeds {
            let spec = TransformSpec::Drop { grid, count: m };
            let clean_acc =
                transformed_accuracy(model, clean_test, &spec, seed, |pred, label| pred == label)?;
            let target = trigger.target_label;
            let asr = transformed_accuracy(model, &triggered, &spec, seed, |pred, _| {
                pred == target
            })?;
            let mut rec = MetricsRecord::new(experiment_id, model_tag, "sweep");
            rec.transform = "drop".into();
            rec.param = m as f64;
            rec.seed = seed;
            rec.clean_acc = clean_acc;
            rec.asr = Some(asr);
            rec.n_clean = clean_test.len();
            rec.n_backdoor = triggered.len();
            records.push(rec);
        }
    }
    Ok(records)
}

/// Accuracy/ASR sweep over PatchShuffle grid sides (patch sizes).
pub fn sweep_shuffle<C: Classifier + ?Sized>(
    model: &C,
    model_tag: &str,
    clean_test: &LabeledDataset,
    trigger: &TriggerSpec,
    grid_sides: &[usize],
    seeds: &[u64],
    experiment_id: &str,
) -> Result<Vec<MetricsRecord>> {
    let triggered = triggered_view(clean_test, trigger)?;
    let mut records = Vec::new();
    for &l in grid_sides {
        let grid = PatchGrid::new(l)?;
        for &seed in seeds {
            let spec = TransformSpec::Shuffle { grid };
            let clean_acc =
                transformed_accuracy(model, clean_test, &spec, seed, |pred, label| pred == label)?;
            let target = trigger.target_label;
            let asr = transformed_accuracy(model, &triggered, &spec, seed, |pred, _| {
                pred == target
            })?;
            let mut rec = MetricsRecord::new(experiment_id, model_tag, "sweep");
            rec.transform = "shuffle".into();
            rec.param = l as f64;
            rec.seed = seed;
            rec.clean_acc = clean_acc;
            rec.asr = Some(asr);
            rec.n_clean = clean_test.len();
            rec.n_backdoor = triggered.len();
            records.push(rec);
        }
    }
    Ok(records)
}

/// Trigger-applied copy of a dataset, excluding target-label samples and
/// relabeling the rest to the target (the labels carry the attack goal).
pub fn triggered_view(data: &LabeledDataset, trigger: &TriggerSpec) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    let mut ids = Vec::new();
    for ((img, &label), &id) in data.images.iter().zip(&data.labels).zip(&data.ids) {
        if label == trigger.target_label {
            continue;
        }
        images.push(apply_trigger(img, trigger)?);
        ids.push(id);
    }
    if images.is_empty() {
        return Err(Error::Input(
            "every sample carries the target label; nothing to trigger".into(),
        ));
    }
    let n = images.len();
    LabeledDataset::with_ids(
        images,
        vec![trigger.target_label; n],
        data.num_classes,
        data.split,
        ids,
    )
}

/// Group means per sweep parameter: (param, mean clean_acc, mean asr).
pub fn aggregate_by_param(records: &[MetricsRecord]) -> Vec<(f64, f64, f64)> {
    let mut params: Vec<f64> = records.iter().map(|r| r.param).collect();
    params.sort_by(|a, b| a.partial_cmp(b).unwrap());
    params.dedup();
    params
        .into_iter()
        .map(|p| {
            let group: Vec<&MetricsRecord> =
                records.iter().filter(|r| r.param == p).collect();
            let n = group.len() as f64;
            let acc = group.iter().map(|r| r.clean_acc).sum::<f64>() / n;
            let asr = group.iter().filter_map(|r| r.asr).sum::<f64>() / n;
            (p, acc, asr)
        })
        .collect()
}

pub const REPORT_COLUMNS: [&str; 16] = [
    "experiment_id",
    "model",
    "attack",
    "transform",
    "param",
    "seed",
    "clean_acc",
    "asr",
    "tpr",
    "tnr",
    "n_clean",
    "n_backdoor",
    "fd_mean",
    "fd_var",
    "fs_mean",
    "fs_var",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Render records as CSV with the fixed column order and a header row.
pub fn render_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    out.push_str(&REPORT_COLUMNS.join(","));
    out.push('\n');
    for r in records {
        let row = [
            r.experiment_id.clone(),
            r.model.clone(),
            r.attack.clone(),
            r.transform.clone(),
            format!("{:.6}", r.param),
            r.seed.to_string(),
            format!("{:.6}", r.clean_acc),
            opt(r.asr),
            opt(r.tpr),
            opt(r.tnr),
            r.n_clean.to_string(),
            r.n_backdoor.to_string(),
            opt(r.fd_mean),
            opt(r.fd_var),
            opt(r.fs_mean),
            opt(r.fs_var),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Write records to disk as CSV or JSON.
pub fn emit_report(records: &[MetricsRecord], path: &Path, format: ReportFormat) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let body = match format {
        ReportFormat::Csv => render_csv(records),
        ReportFormat::Json => serde_json::to_string_pretty(records)? + "\n",
    };
    fs::write(path, body).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("writing report {}: {e}", path.display()),
        ))
    })
}

/// Parse a CSV report produced by [`render_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Input("empty report".into()))?;
    if header != REPORT_COLUMNS.join(",") {
        return Err(Error::Input(format!("unexpected report header: {header}")));
    }
    let parse_opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|e| Error::Input(format!("bad float '{s}': {e}")))
        }
    };
    let mut records = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != REPORT_COLUMNS.len() {
            return Err(Error::Input(format!(
                "row has {} columns, expected {}",
                cols.len(),
                REPORT_COLUMNS.len()
            )));
        }
        records.push(MetricsRecord {
            experiment_id: cols[0].to_string(),
            model: cols[1].to_string(),
            attack: cols[2].to_string(),
            transform: cols[3].to_string(),
            param: cols[4]
                .parse()
                .map_err(|e| Error::Input(format!("bad param: {e}")))?,
            seed: cols[5]
                .parse()
                .map_err(|e| Error::Input(format!("bad seed: {e}")))?,
            clean_acc: cols[6]
                .parse()
                .map_err(|e| Error::Input(format!("bad clean_acc: {e}")))?,
            asr: parse_opt(cols[7])?,
            tpr: parse_opt(cols[8])?,
            tnr: parse_opt(cols[9])?,
            n_clean: cols[10]
                .parse()
                .map_err(|e| Error::Input(format!("bad n_clean: {e}")))?,
            n_backdoor: cols[11]
                .parse()
                .map_err(|e| Error::Input(format!("bad n_backdoor: {e}")))?,
            fd_mean: parse_opt(cols[12])?,
            fd_var: parse_opt(cols[13])?,
            fs_mean: parse_opt(cols[14])?,
            fs_var: parse_opt(cols[15])?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitTag;
    use crate::defense::{FiredRule, Thresholds, verdict_from_counts};
    use crate::poison::make_patch_trigger;
    use crate::tensor::{ImageTensor, Tensor};
    use rand::{Rng, SeedableRng};

    struct FixedClassifier {
        preds: Vec<usize>,
    }

    impl Classifier for FixedClassifier {
        fn num_classes(&self) -> usize {
            4
        }
        fn logits_one(&self, _x: &ImageTensor) -> Result<Vec<f32>> {
            unreachable!("predict_one is overridden")
        }
        fn predict_one(&self, x: &ImageTensor) -> Result<usize> {
            // index encoded in the first pixel
            let idx = (x.data()[0] * 1000.0).round() as usize;
            Ok(self.preds[idx % self.preds.len()])
        }
    }

    struct ConstClassifier(usize);

    impl Classifier for ConstClassifier {
        fn num_classes(&self) -> usize {
            4
        }
        fn logits_one(&self, _x: &ImageTensor) -> Result<Vec<f32>> {
            let mut logits = vec![0.0; 4];
            logits[self.0] = 1.0;
            Ok(logits)
        }
    }

    fn indexed_dataset(labels: &[usize]) -> LabeledDataset {
        let images = (0..labels.len())
            .map(|i| Tensor::full(&[1, 4, 4], i as f32 / 1000.0))
            .collect();
        LabeledDataset::new(images, labels.to_vec(), 4, SplitTag::Test).unwrap()
    }

    #[test]
    fn accuracy_of_perfect_and_anti_stub() {
        let ds = indexed_dataset(&[1, 1, 1, 1]);
        assert_eq!(clean_accuracy(&ConstClassifier(1), &ds).unwrap(), 1.0);
        assert_eq!(clean_accuracy(&ConstClassifier(2), &ds).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_hand_counted_fixture() {
        // 7 of 10 correct
        let labels = vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1];
        let preds = vec![0, 1, 2, 3, 0, 1, 2, 0, 1, 2];
        let ds = indexed_dataset(&labels);
        let model = FixedClassifier { preds };
        assert!((clean_accuracy(&model, &ds).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn accuracy_of_empty_set_is_an_input_error() {
        let empty = LabeledDataset::new(vec![], vec![], 4, SplitTag::Test).unwrap();
        assert_eq!(
            clean_accuracy(&ConstClassifier(0), &empty)
                .unwrap_err()
                .category(),
            "input"
        );
    }

    #[test]
    fn asr_stub_always_target_is_one() {
        let ds = indexed_dataset(&[1, 2, 3, 1, 2, 3]);
        let trigger = make_patch_trigger(&[1, 4, 4], 2, crate::poison::Corner::BottomRight, 1.0, 0)
            .unwrap();
        assert_eq!(attack_success_rate(&ConstClassifier(0), &ds, &trigger).unwrap(), 1.0);
    }

    #[test]
    fn asr_excludes_target_label_samples() {
        // labels: two target (0) + two others; denominator must be 2
        let ds = indexed_dataset(&[0, 0, 1, 2]);
        let trigger = make_patch_trigger(&[1, 4, 4], 2, crate::poison::Corner::BottomRight, 1.0, 0)
            .unwrap();
        let view = triggered_view(&ds, &trigger).unwrap();
        assert_eq!(view.len(), 2);
        // all-target dataset is an input error
        let all_target = indexed_dataset(&[0, 0]);
        assert_eq!(
            attack_success_rate(&ConstClassifier(0), &all_target, &trigger)
                .unwrap_err()
                .category(),
            "input"
        );
    }

    fn verdict(id: u64, flagged: bool) -> Verdict {
        let counts = FlipCounts {
            sample_id: id,
            drop_flips: if flagged { 5 } else { 0 },
            shuffle_flips: 8,
            trials: 8,
        };
        verdict_from_counts(&counts, Thresholds { k_d: 2, k_s: 0 })
    }

    #[test]
    fn tpr_tnr_hand_counted_fixture() {
        // 4 poisoned (3 flagged) + 6 clean (1 flagged)
        let verdicts: Vec<Verdict> = vec![
            verdict(0, true),
            verdict(1, true),
            verdict(2, true),
            verdict(3, false),
            verdict(4, true),
            verdict(5, false),
            verdict(6, false),
            verdict(7, false),
            verdict(8, false),
            verdict(9, false),
        ];
        let poisoned = [true, true, true, true, false, false, false, false, false, false];
        let (tpr, tnr) = tpr_tnr(&verdicts, &poisoned).unwrap();
        assert!((tpr.unwrap() - 0.75).abs() < 1e-12);
        assert!((tnr.unwrap() - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_flag_everything_cases() {
        let verdicts = vec![verdict(0, true), verdict(1, false)];
        let (tpr, tnr) = tpr_tnr(&verdicts, &[true, false]).unwrap();
        assert_eq!((tpr.unwrap(), tnr.unwrap()), (1.0, 1.0));
        let verdicts = vec![verdict(0, true), verdict(1, true)];
        let (tpr, tnr) = tpr_tnr(&verdicts, &[true, false]).unwrap();
        assert_eq!((tpr.unwrap(), tnr.unwrap()), (1.0, 0.0));
    }

    #[test]
    fn zero_poisoned_reports_absent_tpr() {
        let verdicts = vec![verdict(0, false)];
        let (tpr, tnr) = tpr_tnr(&verdicts, &[false]).unwrap();
        assert!(tpr.is_none());
        assert!(tnr.is_some());
    }

    #[test]
    fn sweep_identity_points_match_direct_evaluation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let images: Vec<ImageTensor> = (0..12)
            .map(|_| Tensor::from_fn(&[1, 8, 8], |_| rng.random_range(0.0..1.0)))
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let ds = LabeledDataset::new(images, labels, 4, SplitTag::Test).unwrap();
        let model = ConstClassifier(0);
        let trigger = make_patch_trigger(&[1, 8, 8], 2, crate::poison::Corner::BottomRight, 1.0, 0)
            .unwrap();
        // M = 0 drop is the identity
        let records = sweep_drop(
            &model,
            "stub",
            &ds,
            &trigger,
            PatchGrid::new(4).unwrap(),
            &[0],
            &[1, 2],
            "exp",
        )
        .unwrap();
        let direct_acc = clean_accuracy(&model, &ds).unwrap();
        let direct_asr = attack_success_rate(&model, &ds, &trigger).unwrap();
        for r in &records {
            assert_eq!(r.clean_acc, direct_acc);
            assert_eq!(r.asr.unwrap(), direct_asr);
        }
        // l = 1 shuffle grid is a single patch: identity
        let records = sweep_shuffle(&model, "stub", &ds, &trigger, &[1], &[1], "exp").unwrap();
        assert_eq!(records[0].clean_acc, direct_acc);
        assert_eq!(records[0].asr.unwrap(), direct_asr);
        assert_eq!(records[0].param, 1.0);
    }

    #[test]
    fn sweeps_are_deterministic_per_seed() {
        let ds = indexed_dataset(&[0, 1, 2, 3, 1, 2]);
        let model = ConstClassifier(1);
        let trigger = make_patch_trigger(&[1, 4, 4], 2, crate::poison::Corner::BottomRight, 1.0, 0)
            .unwrap();
        let run = || {
            sweep_drop(
                &model,
                "stub",
                &ds,
                &trigger,
                PatchGrid::new(2).unwrap(),
                &[0, 2],
                &[7, 8],
                "exp",
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn csv_round_trip() {
        let mut rec = MetricsRecord::new("exp1", "tiny_vit", "patch");
        rec.param = 4.0;
        rec.seed = 9;
        rec.clean_acc = 0.9875;
        rec.asr = Some(0.962);
        rec.tpr = None;
        rec.tnr = Some(0.99);
        rec.n_clean = 200;
        rec.n_backdoor = 190;
        rec.fd_mean = Some(1.25);
        let records = vec![rec];
        let csv = render_csv(&records);
        let parsed = parse_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].experiment_id, "exp1");
        assert_eq!(parsed[0].asr, Some(0.962));
        assert!(parsed[0].tpr.is_none());
        assert_eq!(parsed[0].n_clean, 200);
    }

    #[test]
    fn empty_record_list_gives_header_only_file() {
        let csv = render_csv(&[]);
        assert_eq!(csv, REPORT_COLUMNS.join(",") + "\n");
        assert!(parse_csv(&csv).unwrap().is_empty());
    }

    #[test]
    fn column_order_is_stable() {
        let csv = render_csv(&[]);
        assert!(csv.starts_with("experiment_id,model,attack,transform,param,seed,clean_acc"));
    }
}
