//! Continued training with noise-replaced spurious pixels.
//!
//! Every annotated training image is paired with a twin whose masked pixels
//! are replaced by fresh uniform noise. The pair contributes
//! `CE(x) + CE(x') + λ‖z(x) − z(x')‖²` where `z` are the logits, so the model
//! is pushed to ignore whatever sits under the mask. Unannotated images
//! contribute plain cross-entropy when `include_unannotated` is set.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::PixelMask;
use crate::model::{apply_gradient_step, argmax, cross_entropy, softmax, Capability, ModelBackend, ModelError, Sample};
use crate::tensor::ImageTensor;

#[derive(Debug, Error)]
pub enum PairedError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("mask is {mask_h}x{mask_w}, image is {image_h}x{image_w}")]
    DimensionMismatch {
        mask_h: usize,
        mask_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("invalid training configuration: `{field}` {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("no training images to train on")]
    NoTrainingData,
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// I.i.d. uniform on `[0, 1)` per pixel and channel.
    #[default]
    Uniform01,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingJobConfig {
    pub base_checkpoint_id: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub noise: NoiseKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub include_unannotated: bool,
}

impl TrainingJobConfig {
    /// Job-submission rules: `learning_rate` must be strictly positive.
    pub fn validate(&self) -> Result<(), PairedError> {
        self.check(false)
    }

    fn check(&self, allow_zero_lr: bool) -> Result<(), PairedError> {
        let invalid = |field, reason: &str| {
            Err(PairedError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.base_checkpoint_id.is_empty() {
            return invalid("base_checkpoint_id", "must not be empty");
        }
        if self.epochs == 0 {
            return invalid("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return invalid("batch_size", "must be >= 1");
        }
        let lr_ok = self.learning_rate > 0.0 || (allow_zero_lr && self.learning_rate == 0.0);
        if !(self.learning_rate.is_finite() && lr_ok) {
            return invalid("learning_rate", "must be finite and > 0");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return invalid("lambda", "must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairedBatchLoss {
    pub ce_original: f64,
    pub ce_augmented: f64,
    pub consistency: f64,
    pub total: f64,
}

/// Replaces every masked pixel (in all channels) with a uniform draw.
/// Draws happen only for masked positions, in channel-major then row-major
/// order, so the output is a pure function of the RNG state.
pub fn augment_with_noise<R: Rng + ?Sized>(
    image: &ImageTensor,
    mask: &PixelMask,
    rng: &mut R,
) -> Result<ImageTensor, PairedError> {
    if mask.height != image.height || mask.width != image.width {
        return Err(PairedError::DimensionMismatch {
            mask_h: mask.height,
            mask_w: mask.width,
            image_h: image.height,
            image_w: image.width,
        });
    }
    let plane = image.pixel_count();
    let mut out = image.clone();
    for c in 0..image.channels {
        for (p, &bit) in mask.bits.iter().enumerate() {
            if bit == 1 {
                out.data[c * plane + p] = rng.random::<f64>();
            }
        }
    }
    Ok(out)
}

/// Paired loss and its exact parameter gradient.
pub fn paired_loss(
    backend: &dyn ModelBackend,
    params: &[f64],
    image: &ImageTensor,
    augmented: &ImageTensor,
    label: usize,
    lambda: f64,
) -> Result<(PairedBatchLoss, Vec<f64>), ModelError> {
    let desc = backend.descriptor();
    desc.check_label(label)?;
    desc.require(Capability::Gradient)?;
    let z = backend.forward(params, image)?;
    let z_aug = backend.forward(params, augmented)?;
    let diff: Vec<f64> = z.iter().zip(&z_aug).map(|(a, b)| a - b).collect();
    let consistency: f64 = diff.iter().map(|d| d * d).sum();
    let ce_original = cross_entropy(&z, label);
    let ce_augmented = cross_entropy(&z_aug, label);

    let mut cot = softmax(&z);
    cot[label] -= 1.0;
    let mut cot_aug = softmax(&z_aug);
    cot_aug[label] -= 1.0;
    for ((c, ca), d) in cot.iter_mut().zip(cot_aug.iter_mut()).zip(&diff) {
        *c += 2.0 * lambda * d;
        *ca -= 2.0 * lambda * d;
    }
    let mut grad = backend.logits_vjp(params, image, &cot)?;
    let grad_aug = backend.logits_vjp(params, augmented, &cot_aug)?;
    grad.iter_mut().zip(grad_aug).for_each(|(g, ga)| *g += ga);
    Ok((
        PairedBatchLoss {
            ce_original,
            ce_augmented,
            consistency,
            total: ce_original + ce_augmented + lambda * consistency,
        },
        grad,
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub input: &'a ImageTensor,
    pub label: usize,
    /// A mask with at least one spurious pixel makes this item a pair.
    pub mask: Option<&'a PixelMask>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingData<'a> {
    pub train: Vec<TrainItem<'a>>,
    pub test: Vec<Sample<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` when there are no test images.
    pub test_acc: Option<f64>,
    pub consistency_mean: f64,
}

/// Hooks for progress reporting and cooperative cancellation.
pub trait TrainingObserver {
    fn on_batch(&mut self, _epoch: usize, _batch: usize, _num_batches: usize) {}
    fn on_epoch(&mut self, _metrics: &EpochMetrics) {}
    /// Polled before every batch.
    fn should_cancel(&self) -> bool {
        false
    }
}

pub struct NoopObserver;

impl TrainingObserver for NoopObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    /// Parameters after the last completed epoch.
    pub parameters: Vec<f64>,
    pub metrics: Vec<EpochMetrics>,
    pub cancelled: bool,
}

pub fn accuracy<'a>(
    backend: &dyn ModelBackend,
    params: &[f64],
    samples: impl IntoIterator<Item = (usize, &'a ImageTensor)>,
) -> Result<Option<f64>, ModelError> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (label, input) in samples {
        total += 1;
        if argmax(&backend.forward(params, input)?) == label {
            correct += 1;
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// Mini-batch gradient descent on the paired objective.
///
/// Each epoch shuffles with the seeded RNG, then walks the batches; pairs
/// draw fresh noise from the same RNG. Batch gradients are means over the
/// batch items. Cancellation is honoured between batches and rolls back to
/// the parameters of the last completed epoch. A zero learning rate is
/// accepted here (metrics only) even though job submission rejects it.
pub fn run_paired_training(
    backend: &dyn ModelBackend,
    base_params: &[f64],
    data: &TrainingData<'_>,
    cfg: &TrainingJobConfig,
    observer: &mut dyn TrainingObserver,
) -> Result<TrainingOutcome, PairedError> {
    cfg.check(true)?;
    let desc = backend.descriptor();
    desc.require(Capability::Train)?;
    desc.require(Capability::Gradient)?;
    desc.check_params(base_params)?;

    let items: Vec<TrainItem> = data
        .train
        .iter()
        .map(|item| TrainItem {
            mask: item.mask.filter(|m| !m.is_empty()),
            ..*item
        })
        .filter(|item| cfg.include_unannotated || item.mask.is_some())
        .collect();
    if items.is_empty() {
        return Err(PairedError::NoTrainingData);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut params = base_params.to_vec();
    let mut committed = params.clone();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let num_batches = items.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut consistency_sum = 0.0;
        let mut pairs = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            if observer.should_cancel() {
                return Ok(TrainingOutcome {
                    parameters: committed,
                    metrics,
                    cancelled: true,
                });
            }
            let mut grad_sum = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let item = items[i];
                let (loss, grad) = match item.mask {
                    Some(mask) => {
                        let augmented = augment_with_noise(item.input, mask, &mut rng)?;
                        let (l, g) = paired_loss(backend, &params, item.input, &augmented, item.label, cfg.lambda)?;
                        consistency_sum += l.consistency;
                        pairs += 1;
                        (l.total, g)
                    }
                    None => crate::model::loss_and_gradient(backend, &params, item.input, item.label)?,
                };
                batch_loss += loss;
                grad_sum.iter_mut().zip(grad).for_each(|(s, g)| *s += g);
            }
            if !batch_loss.is_finite() {
                return Err(PairedError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += batch_loss;
            let n = batch.len() as f64;
            grad_sum.iter_mut().for_each(|g| *g /= n);
            params = apply_gradient_step(backend, &params, &grad_sum, cfg.learning_rate).map_err(|e| match e {
                ModelError::NonFiniteGradient => PairedError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                },
                other => other.into(),
            })?;
            observer.on_batch(epoch, batch_idx, num_batches);
        }
        committed.clone_from(&params);
        let epoch_metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / items.len() as f64,
            train_acc: accuracy(backend, &params, items.iter().map(|it| (it.label, it.input)))?.unwrap_or(0.0),
            test_acc: accuracy(backend, &params, data.test.iter().map(|s| (s.label, s.input)))?,
            consistency_mean: if pairs > 0 { consistency_sum / pairs as f64 } else { 0.0 },
        };
        observer.on_epoch(&epoch_metrics);
        metrics.push(epoch_metrics);
    }
    Ok(TrainingOutcome {
        parameters: params,
        metrics,
        cancelled: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::InputShape;
    use crate::model::logreg::LogisticRegression;
    use crate::model::loss_and_gradient;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn model() -> LogisticRegression {
        LogisticRegression::new(
            3,
            InputShape {
                channels: 2,
                height: 2,
                width: 3,
            },
        )
    }

    fn random_image(rng: &mut ChaCha8Rng) -> ImageTensor {
        ImageTensor::from_vec(2, 2, 3, (0..12).map(|_| rng.random()).collect()).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng) -> PixelMask {
        PixelMask {
            image_id: "x".into(),
            width: 3,
            height: 2,
            bits: (0..6).map(|_| u8::from(rng.random_bool(0.5))).collect(),
        }
    }

    #[test]
    fn zero_mask_is_identity_and_full_mask_replays_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng);
        let zero = PixelMask::zeros("x", 2, 3);
        assert_eq!(augment_with_noise(&img, &zero, &mut rng).unwrap(), img);

        let full = PixelMask::filled("x", 2, 3, 1);
        let out = augment_with_noise(&img, &full, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let mut replay = ChaCha8Rng::seed_from_u64(99);
        let expected: Vec<f64> = (0..12).map(|_| replay.random::<f64>()).collect();
        assert_eq!(out.data, expected);
    }

    #[test]
    fn single_pixel_mask_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng);
        let mut mask = PixelMask::zeros("x", 2, 3);
        mask.bits[4] = 1;
        let out = augment_with_noise(&img, &mask, &mut rng).unwrap();
        for (i, (a, b)) in out.data.iter().zip(&img.data).enumerate() {
            if i % 6 != 4 {
                assert_eq!(a, b);
            }
        }
        let wrong = PixelMask::zeros("x", 3, 2);
        assert!(matches!(
            augment_with_noise(&img, &wrong, &mut rng),
            Err(PairedError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn identical_twin_has_zero_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = model();
        let params: Vec<f64> = (0..39).map(|_| rng.random_range(-1.0..1.0)).collect();
        let img = random_image(&mut rng);
        let (l, _) = paired_loss(&m, &params, &img, &img, 1, 0.7).unwrap();
        assert_eq!(l.consistency, 0.0);
        let ce = cross_entropy(&m.forward(&params, &img).unwrap(), 1);
        assert_eq!(l.total, 2.0 * ce);
    }

    #[test]
    fn lambda_zero_decouples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = model();
        let params: Vec<f64> = (0..39).map(|_| rng.random_range(-1.0..1.0)).collect();
        let img = random_image(&mut rng);
        let aug = random_image(&mut rng);
        let (l, g) = paired_loss(&m, &params, &img, &aug, 2, 0.0).unwrap();
        let (l1, g1) = loss_and_gradient(&m, &params, &img, 2).unwrap();
        let (l2, g2) = loss_and_gradient(&m, &params, &aug, 2).unwrap();
        assert!((l.total - (l1 + l2)).abs() < 1e-12);
        for ((a, b), c) in g.iter().zip(&g1).zip(&g2) {
            assert!((a - (b + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn paired_gradient_matches_central_differences() {
        let m = model();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let params: Vec<f64> = (0..39).map(|_| rng.random_range(-1.0..1.0)).collect();
            let img = random_image(&mut rng);
            let mask = random_mask(&mut rng);
            let aug = augment_with_noise(&img, &mask, &mut rng).unwrap();
            let lambda = rng.random_range(0.0..2.0);
            let label = rng.random_range(0..3);
            let (_, grad) = paired_loss(&m, &params, &img, &aug, label, lambda).unwrap();
            let f = |p: &[f64]| paired_loss(&m, p, &img, &aug, label, lambda).unwrap().0.total;
            let mut p = params.clone();
            for i in 0..params.len() {
                p[i] = params[i] + 1e-4;
                let up = f(&p);
                p[i] = params[i] - 1e-4;
                let down = f(&p);
                p[i] = params[i];
                assert!((grad[i] - (up - down) / 2e-4).abs() < 1e-5);
            }
        }
    }

    fn toy_data(rng: &mut ChaCha8Rng, n: usize) -> (Vec<ImageTensor>, Vec<usize>, Vec<PixelMask>) {
        let imgs = (0..n).map(|_| random_image(rng)).collect();
        let labels = (0..n).map(|i| i % 3).collect();
        let masks = (0..n).map(|_| random_mask(rng)).collect();
        (imgs, labels, masks)
    }

    fn cfg(lr: f64) -> TrainingJobConfig {
        TrainingJobConfig {
            base_checkpoint_id: "base".into(),
            epochs: 3,
            batch_size: 4,
            learning_rate: lr,
            lambda: 1.0,
            noise: NoiseKind::Uniform01,
            seed: 7,
            include_unannotated: true,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_and_emits_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (imgs, labels, _) = toy_data(&mut rng, 10);
        let data = TrainingData {
            train: imgs
                .iter()
                .zip(&labels)
                .map(|(x, &y)| TrainItem {
                    input: x,
                    label: y,
                    mask: None,
                })
                .collect(),
            test: vec![],
        };
        let mut c = cfg(0.0);
        c.epochs = 1;
        assert!(c.validate().is_err());
        let base: Vec<f64> = (0..39).map(|i| i as f64 * 0.01).collect();
        let out = run_paired_training(&model(), &base, &data, &c, &mut NoopObserver).unwrap();
        assert_eq!(out.parameters, base);
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].test_acc, None);
    }

    #[test]
    fn no_annotations_is_plain_cross_entropy_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (imgs, labels, _) = toy_data(&mut rng, 10);
        let data = TrainingData {
            train: imgs
                .iter()
                .zip(&labels)
                .map(|(x, &y)| TrainItem {
                    input: x,
                    label: y,
                    mask: None,
                })
                .collect(),
            test: vec![],
        };
        let out = run_paired_training(&model(), &[0.0; 39], &data, &cfg(0.5), &mut NoopObserver).unwrap();
        assert!(out.metrics.iter().all(|m| m.consistency_mean == 0.0));

        // Reference: hand-rolled mini-batch descent on cross-entropy with the same shuffles.
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut order: Vec<usize> = (0..10).collect();
        let mut params = vec![0.0; 39];
        for _ in 0..3 {
            order.shuffle(&mut rng);
            for batch in order.chunks(4) {
                let mut g = vec![0.0; 39];
                for &i in batch {
                    let (_, gi) = loss_and_gradient(&m, &params, &imgs[i], labels[i]).unwrap();
                    g.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                }
                for (p, gi) in params.iter_mut().zip(&g) {
                    *p -= 0.5 * (gi / batch.len() as f64);
                }
            }
        }
        assert_eq!(out.parameters, params);
    }

    #[test]
    fn training_is_deterministic_and_errors_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (imgs, labels, masks) = toy_data(&mut rng, 12);
        let data = TrainingData {
            train: imgs
                .iter()
                .zip(&labels)
                .zip(&masks)
                .map(|((x, &y), m)| TrainItem {
                    input: x,
                    label: y,
                    mask: Some(m),
                })
                .collect(),
            test: imgs
                .iter()
                .zip(&labels)
                .map(|(x, &y)| Sample { input: x, label: y })
                .collect(),
        };
        let a = run_paired_training(&model(), &[0.0; 39], &data, &cfg(0.3), &mut NoopObserver).unwrap();
        let b = run_paired_training(&model(), &[0.0; 39], &data, &cfg(0.3), &mut NoopObserver).unwrap();
        assert_eq!(a, b);
        assert!(a.metrics.iter().all(|m| m.consistency_mean > 0.0));

        let mut bad = cfg(0.3);
        bad.learning_rate = -1.0;
        assert!(matches!(
            run_paired_training(&model(), &[0.0; 39], &data, &bad, &mut NoopObserver),
            Err(PairedError::InvalidConfig {
                field: "learning_rate",
                ..
            })
        ));
        let empty = TrainingData::default();
        assert!(matches!(
            run_paired_training(&model(), &[0.0; 39], &empty, &cfg(0.3), &mut NoopObserver),
            Err(PairedError::NoTrainingData)
        ));
        let huge = cfg(1e308);
        assert!(matches!(
            run_paired_training(&model(), &[0.0; 39], &data, &huge, &mut NoopObserver),
            Err(PairedError::NonFiniteLoss { .. })
        ));
    }

    struct CancelAfter {
        batches: usize,
        seen: usize,
    }

    impl TrainingObserver for CancelAfter {
        fn on_batch(&mut self, _: usize, _: usize, _: usize) {
            self.seen += 1;
        }
        fn should_cancel(&self) -> bool {
            self.seen >= self.batches
        }
    }

    #[test]
    fn cancellation_returns_last_completed_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (imgs, labels, _) = toy_data(&mut rng, 8);
        let data = TrainingData {
            train: imgs
                .iter()
                .zip(&labels)
                .map(|(x, &y)| TrainItem {
                    input: x,
                    label: y,
                    mask: None,
                })
                .collect(),
            test: vec![],
        };
        let mut one_epoch = cfg(0.3);
        one_epoch.epochs = 1;
        let reference = run_paired_training(&model(), &[0.0; 39], &data, &one_epoch, &mut NoopObserver).unwrap();
        // two batches per epoch; cancel in the middle of epoch 2
        let mut obs = CancelAfter { batches: 3, seen: 0 };
        let out = run_paired_training(&model(), &[0.0; 39], &data, &cfg(0.3), &mut obs).unwrap();
        assert!(out.cancelled);
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.parameters, reference.parameters);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn loss_decomposition_holds(seed in any::<u64>(), lambda in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = model();
            let params: Vec<f64> = (0..39).map(|_| rng.random_range(-3.0..3.0)).collect();
            let img = random_image(&mut rng);
            let mask = random_mask(&mut rng);
            let aug = augment_with_noise(&img, &mask, &mut rng).unwrap();
            let (l, _) = paired_loss(&m, &params, &img, &aug, 0, lambda).unwrap();
            prop_assert!((l.total - (l.ce_original + l.ce_augmented + lambda * l.consistency)).abs() <= 1e-9);
            prop_assert!(l.ce_original >= 0.0 && l.ce_augmented >= 0.0 && l.consistency >= 0.0);
            let z = m.forward(&params, &img).unwrap();
            let za = m.forward(&params, &aug).unwrap();
            prop_assert_eq!(l.consistency == 0.0, z == za);
        }
    }
}
