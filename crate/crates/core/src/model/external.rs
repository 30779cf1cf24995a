//! Out-of-process model backends.
//!
//! A plugin is an executable invoked once per call as `<exe> <op>`, reading a
//! JSON request on stdin and writing a JSON response on stdout. A nonzero
//! exit status is a failure; stderr is attached to the error.
//!
//! | op               | request                                      | response                       |
//! |------------------|----------------------------------------------|--------------------------------|
//! | `describe`       | `{num_classes, input_shape}`                 | `{parameter_count, capabilities}` |
//! | `forward`        | `{parameters, input}`                        | `{logits}`                     |
//! | `logits_vjp`     | `{parameters, input, cotangent}`             | `{gradient}`                   |
//! | `input_gradient` | `{parameters, input, class_index}`           | `{gradient}` (CHW, flat)       |
//! | `hvp`            | `{parameters, batch: [{input, label}], vector}` | `{product}`                 |
//!
//! `input` is `{channels, height, width, data}` with `data` flat CHW.
//! Capabilities a plugin does not declare are refused up front.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Capability, ModelBackend, ModelBackendDescriptor, ModelError, Sample};
use crate::config::InputShape;
use crate::tensor::ImageTensor;

#[derive(Debug)]
pub struct ExternalBackend {
    exe: PathBuf,
    descriptor: ModelBackendDescriptor,
}

#[derive(Deserialize)]
struct Describe {
    parameter_count: usize,
    capabilities: Vec<Capability>,
}

#[derive(Deserialize)]
struct Logits {
    logits: Vec<f64>,
}

#[derive(Deserialize)]
struct Gradient {
    gradient: Vec<f64>,
}

#[derive(Deserialize)]
struct Product {
    product: Vec<f64>,
}

fn call<T: DeserializeOwned>(exe: &Path, op: &str, request: &Value) -> Result<T, ModelError> {
    let mut child = Command::new(exe)
        .arg(op)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| ModelError::Plugin(format!("cannot start {}: {e}", exe.display())))?;
    let body = serde_json::to_vec(request).expect("request serializes");
    child
        .stdin
        .take()
        .expect("stdin piped")
        .write_all(&body)
        .map_err(|e| ModelError::Plugin(format!("{op}: writing request: {e}")))?;
    let out = child
        .wait_with_output()
        .map_err(|e| ModelError::Plugin(format!("{op}: {e}")))?;
    if !out.status.success() {
        return Err(ModelError::Plugin(format!(
            "{op} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| ModelError::Plugin(format!("{op}: bad response: {e}")))
}

impl ExternalBackend {
    /// Runs `describe` and builds the descriptor from the answer.
    pub fn connect(name: &str, exe: &Path, num_classes: usize, input_shape: InputShape) -> Result<Self, ModelError> {
        let described: Describe = call(
            exe,
            "describe",
            &json!({
                "num_classes": num_classes,
                "input_shape": [input_shape.channels, input_shape.height, input_shape.width],
            }),
        )?;
        if described.parameter_count == 0 {
            return Err(ModelError::Plugin("plugin declared zero parameters".into()));
        }
        Ok(Self {
            exe: exe.to_path_buf(),
            descriptor: ModelBackendDescriptor {
                backend_name: name.to_string(),
                parameter_count: described.parameter_count,
                num_classes,
                input_shape,
                capabilities: described.capabilities.into_iter().collect(),
            },
        })
    }

    fn checked_len(&self, v: Vec<f64>, expected: usize, what: &str) -> Result<Vec<f64>, ModelError> {
        if v.len() != expected {
            return Err(ModelError::Plugin(format!(
                "{what} has {} entries, expected {expected}",
                v.len()
            )));
        }
        Ok(v)
    }
}

impl ModelBackend for ExternalBackend {
    fn descriptor(&self) -> &ModelBackendDescriptor {
        &self.descriptor
    }

    fn forward(&self, params: &[f64], input: &ImageTensor) -> Result<Vec<f64>, ModelError> {
        self.descriptor.check_params(params)?;
        self.descriptor.check_input(input)?;
        let r: Logits = call(&self.exe, "forward", &json!({"parameters": params, "input": input}))?;
        self.checked_len(r.logits, self.descriptor.num_classes, "logits")
    }

    fn logits_vjp(&self, params: &[f64], input: &ImageTensor, cotangent: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.descriptor.require(Capability::Gradient)?;
        self.descriptor.check_params(params)?;
        self.descriptor.check_input(input)?;
        let r: Gradient = call(
            &self.exe,
            "logits_vjp",
            &json!({"parameters": params, "input": input, "cotangent": cotangent}),
        )?;
        self.checked_len(r.gradient, self.descriptor.parameter_count, "gradient")
    }

    fn input_gradient(
        &self,
        params: &[f64],
        input: &ImageTensor,
        class_index: usize,
    ) -> Result<ImageTensor, ModelError> {
        self.descriptor.require(Capability::Gradient)?;
        self.descriptor.check_params(params)?;
        self.descriptor.check_input(input)?;
        self.descriptor.check_label(class_index)?;
        let r: Gradient = call(
            &self.exe,
            "input_gradient",
            &json!({"parameters": params, "input": input, "class_index": class_index}),
        )?;
        let data = self.checked_len(r.gradient, input.data.len(), "input gradient")?;
        Ok(ImageTensor::from_vec(input.channels, input.height, input.width, data).expect("length checked"))
    }

    fn hvp(&self, params: &[f64], batch: &[Sample<'_>], v: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.descriptor.require(Capability::Hvp)?;
        self.descriptor.check_params(params)?;
        self.descriptor.check_params(v)?;
        let batch_json: Vec<Value> = batch
            .iter()
            .map(|s| json!({"input": s.input, "label": s.label}))
            .collect();
        let r: Product = call(
            &self.exe,
            "hvp",
            &json!({"parameters": params, "batch": batch_json, "vector": v}),
        )?;
        self.checked_len(r.product, self.descriptor.parameter_count, "hvp product")
    }
}
