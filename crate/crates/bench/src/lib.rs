//! Shared fixtures for the criterion benchmarks.

use despur_core::model::logreg::LogisticRegression;
use despur_core::model::{ModelBackend, Sample};
use despur_core::synthetic::{spurious_patch, SpuriousPatchSpec, SyntheticDataset};

/// The default spurious-patch dataset with a logistic-regression model and
/// small deterministic non-zero parameters.
pub struct Fixture {
    pub data: SyntheticDataset,
    pub backend: LogisticRegression,
    pub params: Vec<f64>,
}

impl Fixture {
    pub fn new(spec: &SpuriousPatchSpec) -> Self {
        let data = spurious_patch(spec);
        let backend = LogisticRegression::new(data.class_names.len(), data.input_shape);
        let n = backend.descriptor().parameter_count;
        let params = (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * 0.2).collect();
        Self { data, backend, params }
    }

    pub fn train_samples(&self) -> Vec<(String, Sample<'_>)> {
        self.data
            .train
            .iter()
            .map(|s| {
                (
                    s.image_id.clone(),
                    Sample {
                        input: &s.image,
                        label: s.label,
                    },
                )
            })
            .collect()
    }

    pub fn first_test(&self) -> Sample<'_> {
        let t = &self.data.test[0];
        Sample {
            input: &t.image,
            label: t.label,
        }
    }
}
