//! Reference backend: multinomial logistic regression on flattened pixels.
//!
//! Parameters are laid out as the `K × D` weight matrix in row-major order
//! followed by the `K` biases, where `D = channels · height · width`.
//! With `x̃ = [x; 1]` and `p = softmax(Wx + b)`, the per-sample Hessian of the
//! cross-entropy is `(diag p − p pᵀ) ⊗ x̃ x̃ᵀ`, which is what [`hvp`] and
//! [`dense_hessian`] evaluate exactly.
//!
//! [`hvp`]: ModelBackend::hvp
//! [`dense_hessian`]: ModelBackend::dense_hessian

use nalgebra::DMatrix;

use super::{softmax, Capability, ModelBackend, ModelBackendDescriptor, ModelError, Sample};
use crate::config::InputShape;
use crate::tensor::ImageTensor;

pub const BACKEND_NAME: &str = "logreg";

#[derive(Debug, Clone)]
pub struct LogisticRegression {
    descriptor: ModelBackendDescriptor,
    num_features: usize,
}

impl LogisticRegression {
    pub fn new(num_classes: usize, input_shape: InputShape) -> Self {
        let num_features = input_shape.len();
        Self {
            descriptor: ModelBackendDescriptor {
                backend_name: BACKEND_NAME.to_string(),
                parameter_count: num_classes * (num_features + 1),
                num_classes,
                input_shape,
                capabilities: [
                    Capability::Gradient,
                    Capability::Hvp,
                    Capability::ExactHessian,
                    Capability::Train,
                ]
                .into_iter()
                .collect(),
            },
            num_features,
        }
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Row `class` of the weight matrix.
    pub fn weights<'a>(&self, params: &'a [f64], class: usize) -> &'a [f64] {
        &params[class * self.num_features..(class + 1) * self.num_features]
    }

    pub fn bias(&self, params: &[f64], class: usize) -> f64 {
        params[self.descriptor.num_classes * self.num_features + class]
    }

    /// Index of bias `class` in the flat parameter vector.
    pub fn bias_index(&self, class: usize) -> usize {
        self.descriptor.num_classes * self.num_features + class
    }

    fn check(&self, params: &[f64], input: &ImageTensor) -> Result<(), ModelError> {
        self.descriptor.check_params(params)?;
        self.descriptor.check_input(input)
    }

    fn logits_unchecked(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.descriptor.num_classes)
            .map(|k| self.weights(params, k).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias(params, k))
            .collect()
    }

    /// Softmax Jacobian block `diag p − p pᵀ` for one sample.
    fn softmax_curvature(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let k = self.descriptor.num_classes;
        let p = softmax(&self.logits_unchecked(params, x));
        let mut a = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                a[i * k + j] = if i == j { p[i] } else { 0.0 } - p[i] * p[j];
            }
        }
        a
    }
}

impl ModelBackend for LogisticRegression {
    fn descriptor(&self) -> &ModelBackendDescriptor {
        &self.descriptor
    }

    fn forward(&self, params: &[f64], input: &ImageTensor) -> Result<Vec<f64>, ModelError> {
        self.check(params, input)?;
        Ok(self.logits_unchecked(params, &input.data))
    }

    fn logits_vjp(&self, params: &[f64], input: &ImageTensor, cotangent: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check(params, input)?;
        let k = self.descriptor.num_classes;
        let d = self.num_features;
        let mut grad = vec![0.0; self.descriptor.parameter_count];
        for (class, &c) in cotangent.iter().enumerate().take(k) {
            let row = &mut grad[class * d..(class + 1) * d];
            for (g, &x) in row.iter_mut().zip(&input.data) {
                *g = c * x;
            }
            grad[k * d + class] = c;
        }
        Ok(grad)
    }

    fn input_gradient(
        &self,
        params: &[f64],
        input: &ImageTensor,
        class_index: usize,
    ) -> Result<ImageTensor, ModelError> {
        self.check(params, input)?;
        self.descriptor.check_label(class_index)?;
        let mut out = ImageTensor::zeros(input.channels, input.height, input.width);
        out.data.copy_from_slice(self.weights(params, class_index));
        Ok(out)
    }

    fn hvp(&self, params: &[f64], batch: &[Sample<'_>], v: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.descriptor.check_params(params)?;
        self.descriptor.check_params(v)?;
        let k = self.descriptor.num_classes;
        let d = self.num_features;
        let mut out = vec![0.0; self.descriptor.parameter_count];
        if batch.is_empty() {
            return Ok(out);
        }
        for sample in batch {
            self.descriptor.check_input(sample.input)?;
            let x = &sample.input.data;
            // u = V x̃ where V is v viewed as K × (D+1)
            let u: Vec<f64> = (0..k)
                .map(|c| v[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + v[k * d + c])
                .collect();
            let a = self.softmax_curvature(params, x);
            for c in 0..k {
                let w: f64 = (0..k).map(|l| a[c * k + l] * u[l]).sum();
                let row = &mut out[c * d..(c + 1) * d];
                for (o, &xi) in row.iter_mut().zip(x) {
                    *o += w * xi;
                }
                out[k * d + c] += w;
            }
        }
        let n = batch.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }

    fn dense_hessian(&self, params: &[f64], batch: &[Sample<'_>]) -> Result<DMatrix<f64>, ModelError> {
        self.descriptor.check_params(params)?;
        let k = self.descriptor.num_classes;
        let d = self.num_features;
        let n_params = self.descriptor.parameter_count;
        let mut h = DMatrix::<f64>::zeros(n_params, n_params);
        let index = |class: usize, feature: usize| {
            if feature < d {
                class * d + feature
            } else {
                k * d + class
            }
        };
        let mut xt = vec![1.0; d + 1];
        for sample in batch {
            self.descriptor.check_input(sample.input)?;
            xt[..d].copy_from_slice(&sample.input.data);
            let a = self.softmax_curvature(params, &sample.input.data);
            for c in 0..k {
                for l in 0..k {
                    let acl = a[c * k + l];
                    if acl == 0.0 {
                        continue;
                    }
                    for i in 0..=d {
                        let scaled = acl * xt[i];
                        let row = index(c, i);
                        for j in 0..=d {
                            h[(row, index(l, j))] += scaled * xt[j];
                        }
                    }
                }
            }
        }
        if !batch.is_empty() {
            h /= batch.len() as f64;
        }
        Ok(h)
    }
}
