//! Classifier models: a tiny Vision Transformer, a tiny CNN, training,
//! and checkpoint persistence.

mod checkpoint;
mod cnn;
mod init;
mod train;
mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use cnn::{CnnCache, TinyCnn, TinyCnnConfig};
pub use train::{train, EpochMetrics, TrainConfig, TrainEval, TrainReport};
pub use vit::{TinyViT, TinyViTConfig, ViTCache};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::softmax_cross_entropy;
use crate::tensor::{adam_step, AdamHyperParams, AdamState, ImageTensor, Parameter, Scalar, Tensor};

/// Serializable architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    TinyVit(TinyViTConfig),
    TinyCnn(TinyCnnConfig),
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::TinyVit(c) => c.num_classes,
            ModelConfig::TinyCnn(c) => c.num_classes,
        }
    }

    pub fn image(&self) -> (usize, usize, usize) {
        match self {
            ModelConfig::TinyVit(c) => c.image,
            ModelConfig::TinyCnn(c) => c.image,
        }
    }

    pub fn build<T: Scalar>(&self, seed: u64) -> Result<ClassifierModel<T>> {
        match self {
            ModelConfig::TinyVit(c) => build_tiny_vit(*c, seed),
            ModelConfig::TinyCnn(c) => build_tiny_cnn(c.clone(), seed),
        }
    }
}

/// A parameterized predictor: forward inference plus trainable parameters.
#[derive(Debug, Clone)]
pub enum ClassifierModel<T> {
    ViT(TinyViT<T>),
    Cnn(TinyCnn<T>),
}

pub fn build_tiny_vit<T: Scalar>(config: TinyViTConfig, seed: u64) -> Result<ClassifierModel<T>> {
    Ok(ClassifierModel::ViT(TinyViT::build(config, seed)?))
}

pub fn build_tiny_cnn<T: Scalar>(config: TinyCnnConfig, seed: u64) -> Result<ClassifierModel<T>> {
    Ok(ClassifierModel::Cnn(TinyCnn::build(config, seed)?))
}

impl<T: Scalar> ClassifierModel<T> {
    pub fn config(&self) -> ModelConfig {
        match self {
            ClassifierModel::ViT(m) => ModelConfig::TinyVit(m.config),
            ClassifierModel::Cnn(m) => ModelConfig::TinyCnn(m.config.clone()),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ClassifierModel::ViT(m) => m.config.num_classes,
            ClassifierModel::Cnn(m) => m.config.num_classes,
        }
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self {
            ClassifierModel::ViT(m) => m.config.image,
            ClassifierModel::Cnn(m) => m.config.image,
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        match self {
            ClassifierModel::ViT(m) => m.parameters(),
            ClassifierModel::Cnn(m) => m.parameters(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            ClassifierModel::ViT(m) => m.parameters_mut(),
            ClassifierModel::Cnn(m) => m.parameters_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    pub fn adam_state(&self) -> AdamState<T> {
        AdamState::for_params(&self.parameters())
    }

    pub fn apply_adam(&mut self, state: &mut AdamState<T>, hp: &AdamHyperParams) -> Result<()> {
        let mut params = self.parameters_mut();
        adam_step(&mut params, state, hp)
    }

    /// Raw logits for one image.
    pub fn forward_one(&self, x: &ImageTensor) -> Result<Vec<T>> {
        match self {
            ClassifierModel::ViT(m) => m.forward(x),
            ClassifierModel::Cnn(m) => m.forward(x),
        }
    }

    /// Predicted class: argmax of the logits, lowest index on ties.
    pub fn predict_one(&self, x: &ImageTensor) -> Result<usize> {
        Ok(argmax(&self.forward_one(x)?))
    }

    /// Mean cross-entropy over the batch; accumulates parameter gradients.
    /// Call `zero_grads` first for a fresh step.
    pub fn loss_and_grads(&mut self, images: &[&ImageTensor], labels: &[usize]) -> Result<T> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Input(format!(
                "batch of {} images with {} labels",
                images.len(),
                labels.len()
            )));
        }
        let classes = self.num_classes();
        let mut logits = Tensor::zeros(&[images.len(), classes]);
        match self {
            ClassifierModel::ViT(m) => {
                let mut caches = Vec::with_capacity(images.len());
                for (i, img) in images.iter().enumerate() {
                    let (row, cache) = m.forward_cached(img)?;
                    logits.row_mut(i).copy_from_slice(&row);
                    caches.push(cache);
                }
                let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
                for (i, cache) in caches.iter().enumerate() {
                    m.backward(cache, dlogits.row(i))?;
                }
                Ok(loss)
            }
            ClassifierModel::Cnn(m) => {
                let mut caches = Vec::with_capacity(images.len());
                for (i, img) in images.iter().enumerate() {
                    let (row, cache) = m.forward_cached(img)?;
                    logits.row_mut(i).copy_from_slice(&row);
                    caches.push(cache);
                }
                let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
                for (i, cache) in caches.iter().enumerate() {
                    m.backward(cache, dlogits.row(i))?;
                }
                Ok(loss)
            }
        }
    }

    /// Loss without touching gradients; used by the end-to-end gradient
    /// check.
    pub fn loss_only(&self, images: &[&ImageTensor], labels: &[usize]) -> Result<T> {
        let classes = self.num_classes();
        let mut logits = Tensor::zeros(&[images.len(), classes]);
        for (i, img) in images.iter().enumerate() {
            let row = self.forward_one(img)?;
            logits.row_mut(i).copy_from_slice(&row);
        }
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }
}

fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Black-box prediction interface the defense layer queries. Implemented
/// by the real models and by test stubs.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    fn logits_one(&self, x: &ImageTensor) -> Result<Vec<f32>>;

    fn predict_one(&self, x: &ImageTensor) -> Result<usize> {
        let logits = self.logits_one(x)?;
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

impl<T: Scalar> Classifier for ClassifierModel<T> {
    fn num_classes(&self) -> usize {
        ClassifierModel::num_classes(self)
    }

    fn logits_one(&self, x: &ImageTensor) -> Result<Vec<f32>> {
        Ok(self
            .forward_one(x)?
            .into_iter()
            .map(|v| v.as_f64() as f32)
            .collect())
    }

    fn predict_one(&self, x: &ImageTensor) -> Result<usize> {
        ClassifierModel::predict_one(self, x)
    }
}

/// Predict a whole batch in order.
pub fn predict_batch<C: Classifier + ?Sized>(
    model: &C,
    images: &[ImageTensor],
) -> Result<Vec<usize>> {
    images.iter().map(|img| model.predict_one(img)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split, SyntheticSpec};
    use crate::tensor::gradcheck::numerical_grad;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_vit_config() -> TinyViTConfig {
        TinyViTConfig {
            image: (3, 8, 8),
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
        }
    }

    fn rand_image(seed: u64, shape: &[usize]) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn vit_sequence_length_for_32x32_p4() {
        let cfg = TinyViTConfig {
            image: (3, 32, 32),
            patch_size: 4,
            ..Default::default()
        };
        assert_eq!(cfg.num_patches(), 64);
        assert_eq!(cfg.sequence_length(), 65);
    }

    #[test]
    fn vit_logits_shape_and_determinism() {
        let model: ClassifierModel<f32> = build_tiny_vit(small_vit_config(), 7).unwrap();
        let model2: ClassifierModel<f32> = build_tiny_vit(small_vit_config(), 7).unwrap();
        let x = rand_image(1, &[3, 8, 8]);
        let a = model.forward_one(&x).unwrap();
        let b = model2.forward_one(&x).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        assert_eq!(a, model.forward_one(&x).unwrap());
    }

    #[test]
    fn vit_rejects_invalid_config() {
        let cfg = TinyViTConfig {
            embed_dim: 30,
            heads: 4,
            ..small_vit_config()
        };
        assert_eq!(
            build_tiny_vit::<f32>(cfg, 0).unwrap_err().category(),
            "config"
        );
    }

    #[test]
    fn cnn_parameter_count_matches_hand_calculation() {
        let cfg = TinyCnnConfig {
            image: (3, 8, 8),
            channels: vec![4, 8],
            kernel_size: 3,
            num_classes: 5,
        };
        let model: ClassifierModel<f32> = build_tiny_cnn(cfg, 0).unwrap();
        // conv0: 4·3·3·3 + 4 = 112; conv1: 8·4·3·3 + 8 = 296
        // head: (8·2·2)·5 + 5 = 165; total 573
        assert_eq!(model.num_params(), 573);
    }

    #[test]
    fn cnn_forward_shape() {
        let cfg = TinyCnnConfig {
            image: (3, 8, 8),
            channels: vec![4, 8],
            kernel_size: 3,
            num_classes: 5,
        };
        let model: ClassifierModel<f32> = build_tiny_cnn(cfg, 1).unwrap();
        let logits = model.forward_one(&rand_image(2, &[3, 8, 8])).unwrap();
        assert_eq!(logits.len(), 5);
    }

    #[test]
    fn predict_is_argmax_and_batch_invariant() {
        let model: ClassifierModel<f32> = build_tiny_vit(small_vit_config(), 3).unwrap();
        let images: Vec<_> = (0..4).map(|i| rand_image(10 + i, &[3, 8, 8])).collect();
        let batch = predict_batch(&model, &images).unwrap();
        for (i, img) in images.iter().enumerate() {
            let logits = model.forward_one(img).unwrap();
            let pred = model.predict_one(img).unwrap();
            assert_eq!(pred, batch[i]);
            let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(logits[pred], max);
        }
        // permuting the batch permutes the outputs
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| images[i].clone()).collect();
        let permuted_preds = predict_batch(&model, &permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(permuted_preds[j], batch[i]);
        }
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let ds = gen_synthetic(&SyntheticSpec {
            num_classes: 4,
            per_class: 8,
            image_size: 8,
            seed: 5,
        })
        .unwrap();
        let mut model: ClassifierModel<f32> = build_tiny_vit(small_vit_config(), 9).unwrap();
        let before: Vec<Vec<f32>> = model
            .parameters()
            .iter()
            .map(|p| p.value.data().to_vec())
            .collect();
        let report = train(
            &mut model,
            &ds,
            &TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        assert!(report.epochs.is_empty());
        let after: Vec<Vec<f32>> = model
            .parameters()
            .iter()
            .map(|p| p.value.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = gen_synthetic(&SyntheticSpec {
            num_classes: 4,
            per_class: 10,
            image_size: 8,
            seed: 6,
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 42,
            ..Default::default()
        };
        let mut m1: ClassifierModel<f32> = build_tiny_vit(small_vit_config(), 11).unwrap();
        let mut m2: ClassifierModel<f32> = build_tiny_vit(small_vit_config(), 11).unwrap();
        train(&mut m1, &ds, &cfg, None).unwrap();
        train(&mut m2, &ds, &cfg, None).unwrap();
        for (a, b) in m1.parameters().iter().zip(m2.parameters()) {
            assert_eq!(a.value, b.value, "parameter {} diverged", a.name);
        }
    }

    #[test]
    fn non_finite_loss_is_a_training_error() {
        let ds = gen_synthetic(&SyntheticSpec {
            num_classes: 4,
            per_class: 4,
            image_size: 8,
            seed: 7,
        })
        .unwrap();
        let mut model: ClassifierModel<f32> = build_tiny_vit(small_vit_config(), 13).unwrap();
        model.parameters_mut()[0].value.data_mut()[0] = f32::NAN;
        let err = train(&mut model, &ds, &TrainConfig::default(), None).unwrap_err();
        assert_eq!(err.category(), "training");
        assert!(err.to_string().contains("epoch 0"));
    }

    #[test]
    fn vit_learns_synthetic_classes() {
        let ds = gen_synthetic(&SyntheticSpec {
            num_classes: 4,
            per_class: 40,
            image_size: 8,
            seed: 8,
        })
        .unwrap();
        let (train_set, _, test_set) = split(&ds, (0.75, 0.0, 0.25), 3).unwrap();
        let mut model: ClassifierModel<f32> = build_tiny_vit(small_vit_config(), 15).unwrap();
        train(
            &mut model,
            &train_set,
            &TrainConfig {
                epochs: 15,
                batch_size: 16,
                seed: 1,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        let preds = predict_batch(&model, &test_set.images).unwrap();
        let correct = preds
            .iter()
            .zip(&test_set.labels)
            .filter(|(p, l)| p == l)
            .count();
        let acc = correct as f64 / test_set.len() as f64;
        assert!(acc >= 0.95, "tiny ViT reached only {acc} on synthetic data");
    }

    #[test]
    fn cnn_learns_synthetic_classes() {
        let ds = gen_synthetic(&SyntheticSpec {
            num_classes: 4,
            per_class: 40,
            image_size: 8,
            seed: 9,
        })
        .unwrap();
        let (train_set, _, test_set) = split(&ds, (0.75, 0.0, 0.25), 4).unwrap();
        let cfg = TinyCnnConfig {
            image: (3, 8, 8),
            channels: vec![8, 16],
            kernel_size: 3,
            num_classes: 4,
        };
        let mut model: ClassifierModel<f32> = build_tiny_cnn(cfg, 16).unwrap();
        train(
            &mut model,
            &train_set,
            &TrainConfig {
                epochs: 15,
                batch_size: 16,
                seed: 2,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        let preds = predict_batch(&model, &test_set.images).unwrap();
        let correct = preds
            .iter()
            .zip(&test_set.labels)
            .filter(|(p, l)| p == l)
            .count();
        let acc = correct as f64 / test_set.len() as f64;
        assert!(acc >= 0.95, "tiny CNN reached only {acc} on synthetic data");
    }

    /// End-to-end gradient check: analytic loss gradient for a sampled
    /// parameter subset matches central differences at f64.
    #[test]
    fn end_to_end_gradient_check_on_parameter_subset() {
        for (tag, mut model) in [
            (
                "vit",
                build_tiny_vit::<f64>(small_vit_config(), 21).unwrap(),
            ),
            (
                "cnn",
                build_tiny_cnn::<f64>(
                    TinyCnnConfig {
                        image: (3, 8, 8),
                        channels: vec![4, 8],
                        kernel_size: 3,
                        num_classes: 4,
                    },
                    22,
                )
                .unwrap(),
            ),
        ] {
            let images: Vec<ImageTensor> = (0..3).map(|i| rand_image(30 + i, &[3, 8, 8])).collect();
            let image_refs: Vec<&ImageTensor> = images.iter().collect();
            let labels = vec![0usize, 2, 3];

            model.zero_grads();
            model.loss_and_grads(&image_refs, &labels).unwrap();
            let analytic: Vec<Vec<f64>> = model
                .parameters()
                .iter()
                .map(|p| p.grad.data().to_vec())
                .collect();

            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let num_params = model.parameters().len();
            for _ in 0..10 {
                let pi = rng.random_range(0..num_params);
                let len = model.parameters()[pi].value.len();
                let ei = rng.random_range(0..len);
                let h = 1e-5;

                let orig = model.parameters()[pi].value.data()[ei];
                model.parameters_mut()[pi].value.data_mut()[ei] = orig + h;
                let plus = model.loss_only(&image_refs, &labels).unwrap();
                model.parameters_mut()[pi].value.data_mut()[ei] = orig - h;
                let minus = model.loss_only(&image_refs, &labels).unwrap();
                model.parameters_mut()[pi].value.data_mut()[ei] = orig;

                let numerical = (plus - minus) / (2.0 * h);
                let a = analytic[pi][ei];
                let rel = (a - numerical).abs() / a.abs().max(numerical.abs()).max(1e-6);
                assert!(
                    rel <= 1e-3,
                    "{tag} param {pi} elem {ei}: analytic {a}, numerical {numerical}, rel {rel}"
                );
            }
        }
    }

    #[test]
    fn numerical_grad_helper_smoke() {
        // quadratic: d/dx sum(x²) = 2x
        let x = Tensor::<f64>::from_fn(&[3], |i| i as f64 + 0.5);
        let g = numerical_grad(
            &mut |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &x,
            1e-5,
        )
        .unwrap();
        for i in 0..3 {
            assert!((g.data()[i] - 2.0 * x.data()[i]).abs() < 1e-6);
        }
    }
}
