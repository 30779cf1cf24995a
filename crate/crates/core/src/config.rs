//! Workbench configuration file (JSON).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Syntax(serde_json::Error),
    #[error("config field `{field}` is invalid: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Name of the offending field, when there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parsed configuration. `input_shape` is written as `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    pub class_names: Vec<String>,
    #[serde(with = "shape_triple")]
    pub input_shape: InputShape,
    pub backend_name: String,
    #[serde(default)]
    pub backend_params: serde_json::Map<String, Value>,
    /// Out-of-process segmentation backends, name -> executable.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub segmentation_plugins: BTreeMap<String, PathBuf>,
    /// Out-of-process model backends, name -> executable.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub model_plugins: BTreeMap<String, PathBuf>,
}

pub(crate) mod shape_triple {
    use super::InputShape;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(s: &InputShape, ser: S) -> Result<S::Ok, S::Error> {
        [s.channels, s.height, s.width].serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<InputShape, D::Error> {
        let [channels, height, width] = <[usize; 3]>::deserialize(de)?;
        Ok(InputShape {
            channels,
            height,
            width,
        })
    }
}

impl AppConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(ConfigError::Syntax)?;
        Self::from_value(value)
    }

    /// Field-by-field validation so the error names the offending field.
    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        let obj = value
            .as_object()
            .ok_or_else(|| ConfigError::invalid("<root>", "expected a JSON object"))?;
        for field in ["class_names", "input_shape", "backend_name"] {
            if !obj.contains_key(field) {
                return Err(ConfigError::invalid(field, "missing"));
            }
        }
        let class_names: Vec<String> = serde_json::from_value(obj["class_names"].clone())
            .map_err(|e| ConfigError::invalid("class_names", e.to_string()))?;
        if class_names.is_empty() {
            return Err(ConfigError::invalid("class_names", "must list at least one class"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &class_names {
            if name.is_empty() || name.contains('/') || name.contains('\\') || name.starts_with('.') {
                return Err(ConfigError::invalid("class_names", format!("bad class name {name:?}")));
            }
            if !seen.insert(name) {
                return Err(ConfigError::invalid("class_names", format!("duplicate class {name:?}")));
            }
        }
        let shape: [usize; 3] = serde_json::from_value(obj["input_shape"].clone())
            .map_err(|e| ConfigError::invalid("input_shape", e.to_string()))?;
        if !(shape[0] == 1 || shape[0] == 3) || shape[1] == 0 || shape[2] == 0 {
            return Err(ConfigError::invalid(
                "input_shape",
                "expected [channels (1 or 3), height > 0, width > 0]",
            ));
        }
        let backend_name = obj["backend_name"]
            .as_str()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ConfigError::invalid("backend_name", "expected a non-empty string"))?
            .to_string();
        let backend_params = match obj.get("backend_params") {
            None | Some(Value::Null) => serde_json::Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(_) => return Err(ConfigError::invalid("backend_params", "expected an object")),
        };
        let plugins = |field: &str| -> Result<BTreeMap<String, PathBuf>, ConfigError> {
            match obj.get(field) {
                None | Some(Value::Null) => Ok(BTreeMap::new()),
                Some(v) => serde_json::from_value(v.clone()).map_err(|e| ConfigError::invalid(field, e.to_string())),
            }
        };
        Ok(AppConfig {
            class_names,
            input_shape: InputShape {
                channels: shape[0],
                height: shape[1],
                width: shape[2],
            },
            backend_name,
            backend_params,
            segmentation_plugins: plugins("segmentation_plugins")?,
            model_plugins: plugins("model_plugins")?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}
