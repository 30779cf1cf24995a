//! Model backend abstraction.
//!
//! A backend exposes a handful of primitives over a flat parameter vector:
//! logits, a vector-Jacobian product of the logits, the input gradient of a
//! class logit, and (optionally) products with the mean loss Hessian.
//! Losses and their gradients are assembled from those primitives here, so
//! cross-entropy and the paired loss mean the same thing for every backend.

mod checkpoint;
pub mod external;
pub mod logreg;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{AppConfig, InputShape};
use crate::tensor::ImageTensor;

pub use checkpoint::{Checkpoint, CheckpointMetadata, CheckpointStore, CHECKPOINT_EXTENSION};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {actual:?} does not match model input {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("parameter vector has {actual} entries, model expects {expected}")]
    ParameterCount { expected: usize, actual: usize },
    #[error("label {label} outside [0, {num_classes})")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("backend `{backend}` lacks capability `{capability}`")]
    CapabilityMissing { backend: String, capability: Capability },
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("unknown model backend `{0}`")]
    UnknownBackend(String),
    #[error("checkpoint is for backend `{found}`, active backend is `{expected}`")]
    BackendMismatch { expected: String, found: String },
    #[error("unreadable checkpoint {path}: {reason}")]
    UnreadableCheckpoint { path: String, reason: String },
    #[error("unknown checkpoint `{0}`")]
    UnknownCheckpoint(String),
    #[error("model plugin failed: {0}")]
    Plugin(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Gradient,
    Hvp,
    ExactHessian,
    Train,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Gradient => "gradient",
            Capability::Hvp => "hvp",
            Capability::ExactHessian => "exact_hessian",
            Capability::Train => "train",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBackendDescriptor {
    pub backend_name: String,
    pub parameter_count: usize,
    pub num_classes: usize,
    pub input_shape: InputShape,
    pub capabilities: BTreeSet<Capability>,
}

impl ModelBackendDescriptor {
    pub fn require(&self, capability: Capability) -> Result<(), ModelError> {
        if self.capabilities.contains(&capability) {
            Ok(())
        } else {
            Err(ModelError::CapabilityMissing {
                backend: self.backend_name.clone(),
                capability,
            })
        }
    }

    pub fn check_input(&self, input: &ImageTensor) -> Result<(), ModelError> {
        let s = self.input_shape;
        if input.shape() != (s.channels, s.height, s.width) {
            return Err(ModelError::ShapeMismatch {
                expected: (s.channels, s.height, s.width),
                actual: input.shape(),
            });
        }
        Ok(())
    }

    pub fn check_params(&self, params: &[f64]) -> Result<(), ModelError> {
        if params.len() != self.parameter_count {
            return Err(ModelError::ParameterCount {
                expected: self.parameter_count,
                actual: params.len(),
            });
        }
        Ok(())
    }

    pub fn check_label(&self, label: usize) -> Result<(), ModelError> {
        if label >= self.num_classes {
            return Err(ModelError::InvalidLabel {
                label,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }
}

/// A labelled input borrowed from the dataset.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub input: &'a ImageTensor,
    pub label: usize,
}

pub trait ModelBackend: Send + Sync + fmt::Debug {
    fn descriptor(&self) -> &ModelBackendDescriptor;

    fn forward(&self, params: &[f64], input: &ImageTensor) -> Result<Vec<f64>, ModelError>;

    /// `cotangentᵀ · ∂logits/∂params`, a vector of `parameter_count` entries.
    fn logits_vjp(&self, params: &[f64], input: &ImageTensor, cotangent: &[f64]) -> Result<Vec<f64>, ModelError>;

    /// `∂logits[class]/∂input`, shaped like the input.
    fn input_gradient(
        &self,
        params: &[f64],
        input: &ImageTensor,
        class_index: usize,
    ) -> Result<ImageTensor, ModelError>;

    /// Product of the mean cross-entropy Hessian over `batch` with `v`.
    fn hvp(&self, _params: &[f64], _batch: &[Sample<'_>], _v: &[f64]) -> Result<Vec<f64>, ModelError> {
        Err(ModelError::CapabilityMissing {
            backend: self.descriptor().backend_name.clone(),
            capability: Capability::Hvp,
        })
    }

    /// Dense mean cross-entropy Hessian over `batch`.
    fn dense_hessian(&self, _params: &[f64], _batch: &[Sample<'_>]) -> Result<DMatrix<f64>, ModelError> {
        Err(ModelError::CapabilityMissing {
            backend: self.descriptor().backend_name.clone(),
            capability: Capability::ExactHessian,
        })
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `-log softmax(logits)[label]` computed with log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Cross-entropy loss and its parameter gradient `(softmax − onehot)ᵀ J`.
pub fn loss_and_gradient(
    backend: &dyn ModelBackend,
    params: &[f64],
    input: &ImageTensor,
    label: usize,
) -> Result<(f64, Vec<f64>), ModelError> {
    let desc = backend.descriptor();
    desc.check_label(label)?;
    desc.require(Capability::Gradient)?;
    let logits = backend.forward(params, input)?;
    let mut residual = softmax(&logits);
    residual[label] -= 1.0;
    let grad = backend.logits_vjp(params, input, &residual)?;
    Ok((cross_entropy(&logits, label), grad))
}

/// `params − learning_rate · grad`.
pub fn apply_gradient_step(
    backend: &dyn ModelBackend,
    params: &[f64],
    grad: &[f64],
    learning_rate: f64,
) -> Result<Vec<f64>, ModelError> {
    let desc = backend.descriptor();
    desc.require(Capability::Train)?;
    desc.check_params(params)?;
    desc.check_params(grad)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(ModelError::NonFiniteGradient);
    }
    Ok(params.iter().zip(grad).map(|(p, g)| p - learning_rate * g).collect())
}

/// Resolves the configured backend: the built-in `logreg` or a registered
/// out-of-process plugin.
pub fn backend_from_config(config: &AppConfig) -> Result<Arc<dyn ModelBackend>, ModelError> {
    if config.backend_name == logreg::BACKEND_NAME {
        return Ok(Arc::new(logreg::LogisticRegression::new(
            config.num_classes(),
            config.input_shape,
        )));
    }
    match config.model_plugins.get(&config.backend_name) {
        Some(exe) => Ok(Arc::new(external::ExternalBackend::connect(
            &config.backend_name,
            exe,
            config.num_classes(),
            config.input_shape,
        )?)),
        None => Err(ModelError::UnknownBackend(config.backend_name.clone())),
    }
}
