//! Scratch exploration of desk-scale dynamics (not part of the test
//! suite): trains benign/poisoned models and prints flip-count
//! distributions, detection rates, and scenario-2 survival.

use std::time::Instant;

use patchward::data::{gen_synthetic, split, SyntheticSpec};
use patchward::defense::{
    calibrate, detect_batch, flip_counts_batch, no_clean_data_profile, Decision, DetectionProfile,
};
use patchward::eval::{attack_success_rate, clean_accuracy, tpr_tnr, triggered_view};
use patchward::models::{build_tiny_vit, train, TrainConfig, TinyViTConfig};
use patchward::patchproc::PatchGrid;
use patchward::poison::{make_patch_trigger, make_sinusoid_trigger, poison_dataset, Corner};

fn main() {
    let t0 = Instant::now();
    let num_classes = 16usize;
    let ds = gen_synthetic(&SyntheticSpec {
        num_classes,
        per_class: 128,
        image_size: 16,
        seed: 1001,
    })
    .unwrap();
    let (train_set, val_set, test_set) = split(&ds, (0.8, 0.1, 0.1), 2002).unwrap();
    println!(
        "data: train {} val {} test {} ({:?})",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        t0.elapsed()
    );

    let vit_cfg = TinyViTConfig {
        image: (3, 16, 16),
        num_classes,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        epochs: 25,
        batch_size: 32,
        seed: 31,
        ..Default::default()
    };

    // benign
    let t = Instant::now();
    let mut benign = build_tiny_vit::<f32>(vit_cfg, 41).unwrap();
    let report = train(&mut benign, &train_set, &tcfg, None).unwrap();
    let benign_acc = clean_accuracy(&benign, &test_set).unwrap();
    println!(
        "benign: acc {benign_acc:.4} last-loss {:.4} in {:?}",
        report.epochs.last().unwrap().train_loss,
        t.elapsed()
    );

    // patch attack
    let trigger = make_patch_trigger(&[3, 16, 16], 3, Corner::BottomRight, 1.0, 0).unwrap();
    let (poisoned, _recs) = poison_dataset(&train_set, &trigger, 0.05, 51, false).unwrap();
    let t = Instant::now();
    let mut patch_model = build_tiny_vit::<f32>(vit_cfg, 41).unwrap();
    train(&mut patch_model, &poisoned.dataset, &tcfg, None).unwrap();
    let patch_acc = clean_accuracy(&patch_model, &test_set).unwrap();
    let patch_asr = attack_success_rate(&patch_model, &test_set, &trigger).unwrap();
    println!(
        "patch-poisoned: acc {patch_acc:.4} asr {patch_asr:.4} in {:?}",
        t.elapsed()
    );

    // flip counts on the poisoned model
    let profile = DetectionProfile::new(777);
    let t = Instant::now();
    let clean_counts = flip_counts_batch(&patch_model, &val_set, &profile).unwrap();
    let triggered_val = triggered_view(&val_set, &trigger).unwrap();
    let backdoor_counts = flip_counts_batch(&patch_model, &triggered_val, &profile).unwrap();
    let hist = |counts: &[patchward::FlipCounts], f: fn(&patchward::FlipCounts) -> usize| {
        let mut h = vec![0usize; 33];
        for c in counts {
            h[f(c)] += 1;
        }
        h.iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(v, n)| format!("{v}:{n}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("flip counts in {:?}", t.elapsed());
    println!("  clean    F_d: {}", hist(&clean_counts, |c| c.drop_flips));
    println!("  clean    F_s: {}", hist(&clean_counts, |c| c.shuffle_flips));
    println!("  backdoor F_d: {}", hist(&backdoor_counts, |c| c.drop_flips));
    println!("  backdoor F_s: {}", hist(&backdoor_counts, |c| c.shuffle_flips));

    // scenario 1: calibrate on val, detect on test
    let calibrated = calibrate(&patch_model, &val_set, &profile).unwrap();
    println!("thresholds: {:?}", calibrated.thresholds.unwrap());
    let triggered_test = triggered_view(&test_set, &trigger).unwrap();
    let clean_verdicts = detect_batch(&patch_model, &test_set, &calibrated).unwrap();
    let backdoor_verdicts = detect_batch(&patch_model, &triggered_test, &calibrated).unwrap();
    let mut all = clean_verdicts.clone();
    all.extend(backdoor_verdicts.iter().copied());
    let mut flags = vec![false; clean_verdicts.len()];
    flags.extend(vec![true; backdoor_verdicts.len()]);
    let (tpr, tnr) = tpr_tnr(&all, &flags).unwrap();
    println!("patch scenario-1: TPR {:?} TNR {:?}", tpr, tnr);

    // sinusoid attack
    let sine = make_sinusoid_trigger(&[3, 16, 16], 0.10, 4, 0).unwrap();
    let (sine_poisoned, _) = poison_dataset(&train_set, &sine, 0.05, 52, false).unwrap();
    let t = Instant::now();
    let mut sine_model = build_tiny_vit::<f32>(vit_cfg, 41).unwrap();
    train(&mut sine_model, &sine_poisoned.dataset, &tcfg, None).unwrap();
    let sine_acc = clean_accuracy(&sine_model, &test_set).unwrap();
    let sine_asr = attack_success_rate(&sine_model, &test_set, &sine).unwrap();
    println!(
        "sine-poisoned: acc {sine_acc:.4} asr {sine_asr:.4} in {:?}",
        t.elapsed()
    );
    let sine_clean_counts = flip_counts_batch(&sine_model, &val_set, &profile).unwrap();
    let sine_triggered_val = triggered_view(&val_set, &sine).unwrap();
    let sine_backdoor_counts =
        flip_counts_batch(&sine_model, &sine_triggered_val, &profile).unwrap();
    println!("  sine clean    F_d: {}", hist(&sine_clean_counts, |c| c.drop_flips));
    println!("  sine clean    F_s: {}", hist(&sine_clean_counts, |c| c.shuffle_flips));
    println!("  sine backdoor F_d: {}", hist(&sine_backdoor_counts, |c| c.drop_flips));
    println!("  sine backdoor F_s: {}", hist(&sine_backdoor_counts, |c| c.shuffle_flips));
    let sine_calibrated = calibrate(&sine_model, &val_set, &profile).unwrap();
    println!("sine thresholds: {:?}", sine_calibrated.thresholds.unwrap());
    let sine_triggered_test = triggered_view(&test_set, &sine).unwrap();
    let sine_clean_v = detect_batch(&sine_model, &test_set, &sine_calibrated).unwrap();
    let sine_backdoor_v = detect_batch(&sine_model, &sine_triggered_test, &sine_calibrated).unwrap();
    let mut all = sine_clean_v.clone();
    all.extend(sine_backdoor_v.iter().copied());
    let mut flags = vec![false; sine_clean_v.len()];
    flags.extend(vec![true; sine_backdoor_v.len()]);
    let (tpr, tnr) = tpr_tnr(&all, &flags).unwrap();
    println!("sine scenario-1: TPR {:?} TNR {:?}", tpr, tnr);

    // negative control: benign model, calibrated thresholds, clean test
    let benign_calibrated = calibrate(&benign, &val_set, &profile).unwrap();
    let benign_verdicts = detect_batch(&benign, &test_set, &benign_calibrated).unwrap();
    let flagged = benign_verdicts
        .iter()
        .filter(|v| v.decision == Decision::Backdoor)
        .count();
    println!(
        "negative control: benign thresholds {:?}, flag rate {:.3}",
        benign_calibrated.thresholds.unwrap(),
        flagged as f64 / benign_verdicts.len() as f64
    );

    // scenario 2 exploration: survival under the no-clean-data profile
    for trials in [4usize, 8, 16, 32] {
        for (l_d, m) in [(4usize, 4usize), (4, 6)] {
            let base = DetectionProfile {
                trials,
                drop_grid: PatchGrid { l: l_d },
                drop_count: m,
                shuffle_grid: PatchGrid { l: 4 },
                master_seed: 909,
                ..DetectionProfile::new(909)
            };
            let prof = no_clean_data_profile(base).unwrap();
            // bootstrap = the already-trained patch model stands in here
            let verdicts = detect_batch(&patch_model, &poisoned.dataset, &prof).unwrap();
            let mut kept_clean = 0usize;
            let mut kept_poison = 0usize;
            let mut total_poison = 0usize;
            for (v, &is_poisoned) in verdicts.iter().zip(&poisoned.flags) {
                let kept = v.decision == Decision::Clean;
                if is_poisoned {
                    total_poison += 1;
                    if kept {
                        kept_poison += 1;
                    }
                } else if kept {
                    kept_clean += 1;
                }
            }
            let total_clean = poisoned.dataset.len() - total_poison;
            println!(
                "scenario2 T={trials} drop(l={l_d},M={m}): clean kept {kept_clean}/{total_clean} ({:.2}) poison kept {kept_poison}/{total_poison}",
                kept_clean as f64 / total_clean as f64
            );
        }
    }
    println!("total {:?}", t0.elapsed());
}
