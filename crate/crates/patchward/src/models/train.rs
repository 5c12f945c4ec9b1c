//! Minibatch training loop with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{predict_batch, ClassifierModel};
use crate::poison::{apply_trigger, TriggerSpec};
use crate::seed::derive_seed;
use crate::tensor::{AdamHyperParams, AdamState, Scalar};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyperParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            adam: AdamHyperParams::default(),
            seed: 0,
        }
    }
}

/// Optional held-out views evaluated after every epoch.
pub struct TrainEval<'a> {
    pub val: &'a LabeledDataset,
    /// When set, the val images also get this trigger applied and ASR is
    /// reported (samples already labeled with the target are excluded).
    pub trigger: Option<&'a TriggerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub asr: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
}

/// Train in place. Deterministic given the seed (single-threaded); zero
/// epochs leaves the model untouched and returns an empty report.
pub fn train<T: Scalar>(
    model: &mut ClassifierModel<T>,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    eval: Option<&TrainEval<'_>>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    if data.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but model head has {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }

    let mut state: AdamState<T> = model.adam_state();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train/shuffle"));

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.zero_grads();
            let images: Vec<_> = batch.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let loss = model.loss_and_grads(&images, &labels)?;
            let loss_f64 = loss.as_f64();
            if !loss_f64.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    message: format!("non-finite loss {loss_f64}"),
                });
            }
            loss_sum += loss_f64 * batch.len() as f64;
            seen += batch.len();
            model.apply_adam(&mut state, &cfg.adam)?;
        }

        let mut metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_accuracy: None,
            asr: None,
        };
        if let Some(eval) = eval {
            metrics.val_accuracy = Some(accuracy(model, eval.val)?);
            if let Some(trigger) = eval.trigger {
                metrics.asr = Some(asr(model, eval.val, trigger)?);
            }
        }
        report.epochs.push(metrics);
    }
    Ok(report)
}

fn accuracy<T: Scalar>(model: &ClassifierModel<T>, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let preds = predict_batch(model, &data.images)?;
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn asr<T: Scalar>(
    model: &ClassifierModel<T>,
    data: &LabeledDataset,
    trigger: &TriggerSpec,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        if label == trigger.target_label {
            continue;
        }
        total += 1;
        let triggered = apply_trigger(img, trigger)?;
        if model.predict_one(&triggered)? == trigger.target_label {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::Input(
            "every sample carries the target label; ASR undefined".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}
