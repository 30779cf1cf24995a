//! Checkpoint container.
//!
//! ```text
//! b"RBCK" | header_len: u32 LE | header: JSON (header_len bytes) | parameters: f64 LE × parameter_count
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{ModelBackendDescriptor, ModelError};
use crate::config::InputShape;
use crate::fsutil::{is_valid_identifier, write_atomic};

pub const CHECKPOINT_EXTENSION: &str = "rbck";
const MAGIC: &[u8; 4] = b"RBCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_job_id: Option<String>,
    #[serde(default)]
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub checkpoint_id: String,
    pub backend_name: String,
    pub num_classes: usize,
    pub input_shape: InputShape,
    pub parameters: Vec<f64>,
    pub metadata: CheckpointMetadata,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    checkpoint_id: String,
    backend_name: String,
    parameter_count: usize,
    num_classes: usize,
    input_shape: [usize; 3],
    metadata: CheckpointMetadata,
}

impl Checkpoint {
    pub fn new(
        checkpoint_id: impl Into<String>,
        descriptor: &ModelBackendDescriptor,
        parameters: Vec<f64>,
        tag: impl Into<String>,
        parent_job_id: Option<String>,
    ) -> Self {
        Checkpoint {
            checkpoint_id: checkpoint_id.into(),
            backend_name: descriptor.backend_name.clone(),
            num_classes: descriptor.num_classes,
            input_shape: descriptor.input_shape,
            parameters,
            metadata: CheckpointMetadata {
                created_at: Utc::now(),
                parent_job_id,
                tag: tag.into(),
            },
        }
    }

    /// All-zero parameters for the given backend.
    pub fn zeros(checkpoint_id: impl Into<String>, descriptor: &ModelBackendDescriptor) -> Self {
        Self::new(
            checkpoint_id,
            descriptor,
            vec![0.0; descriptor.parameter_count],
            "zero-init",
            None,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            checkpoint_id: self.checkpoint_id.clone(),
            backend_name: self.backend_name.clone(),
            parameter_count: self.parameters.len(),
            num_classes: self.num_classes,
            input_shape: [
                self.input_shape.channels,
                self.input_shape.height,
                self.input_shape.width,
            ],
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.parameters.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.parameters {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, ModelError> {
        let unreadable = |reason: &str| ModelError::UnreadableCheckpoint {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(unreadable("missing RBCK magic"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() < header_len {
            return Err(unreadable("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| unreadable(&format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(unreadable(&format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let raw = &body[header_len..];
        if raw.len() != header.parameter_count * 8 {
            return Err(unreadable(&format!(
                "expected {} parameter bytes, found {}",
                header.parameter_count * 8,
                raw.len()
            )));
        }
        let parameters = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let [channels, height, width] = header.input_shape;
        Ok(Checkpoint {
            checkpoint_id: header.checkpoint_id,
            backend_name: header.backend_name,
            num_classes: header.num_classes,
            input_shape: InputShape {
                channels,
                height,
                width,
            },
            parameters,
            metadata: header.metadata,
        })
    }

    /// Reads a checkpoint file without checking it against any backend.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|e| ModelError::UnreadableCheckpoint {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    /// Checks that this checkpoint can drive `descriptor`'s backend.
    pub fn validate_for(&self, descriptor: &ModelBackendDescriptor) -> Result<(), ModelError> {
        if self.backend_name != descriptor.backend_name {
            return Err(ModelError::BackendMismatch {
                expected: descriptor.backend_name.clone(),
                found: self.backend_name.clone(),
            });
        }
        let s = descriptor.input_shape;
        if self.input_shape != s || self.num_classes != descriptor.num_classes {
            return Err(ModelError::ShapeMismatch {
                expected: (s.channels, s.height, s.width),
                actual: (
                    self.input_shape.channels,
                    self.input_shape.height,
                    self.input_shape.width,
                ),
            });
        }
        descriptor.check_params(&self.parameters)
    }
}

/// Checkpoints stored as `<ckpt_root>/<checkpoint_id>.rbck`.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, checkpoint_id: &str) -> PathBuf {
        self.root.join(format!("{checkpoint_id}.{CHECKPOINT_EXTENSION}"))
    }

    pub fn exists(&self, checkpoint_id: &str) -> bool {
        is_valid_identifier(checkpoint_id) && self.path_for(checkpoint_id).is_file()
    }

    /// Loads by id and validates against the active backend.
    pub fn load(&self, checkpoint_id: &str, descriptor: &ModelBackendDescriptor) -> Result<Checkpoint, ModelError> {
        if !self.exists(checkpoint_id) {
            return Err(ModelError::UnknownCheckpoint(checkpoint_id.to_string()));
        }
        let ckpt = Checkpoint::load(&self.path_for(checkpoint_id))?;
        ckpt.validate_for(descriptor)?;
        Ok(ckpt)
    }

    pub fn save(&self, ckpt: &Checkpoint) -> Result<PathBuf, ModelError> {
        if !is_valid_identifier(&ckpt.checkpoint_id) {
            return Err(ModelError::UnreadableCheckpoint {
                path: ckpt.checkpoint_id.clone(),
                reason: "checkpoint id must be [A-Za-z0-9._-]".into(),
            });
        }
        let path = self.path_for(&ckpt.checkpoint_id);
        ckpt.save(&path)?;
        Ok(path)
    }

    /// Headers of every readable checkpoint, sorted by id. Unreadable files
    /// are skipped.
    pub fn list(&self) -> Result<Vec<Checkpoint>, ModelError> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(CHECKPOINT_EXTENSION) {
                continue;
            }
            match Checkpoint::load(&path) {
                Ok(c) => out.push(c),
                Err(e) => tracing::warn!("skipping checkpoint {}: {e}", path.display()),
            }
        }
        out.sort_by(|a, b| a.checkpoint_id.cmp(&b.checkpoint_id));
        Ok(out)
    }

    /// First id of the form `base`, `base-2`, `base-3`, ... not yet on disk.
    pub fn fresh_id(&self, base: &str) -> String {
        if !self.path_for(base).exists() {
            return base.to_string();
        }
        (2..)
            .map(|n| format!("{base}-{n}"))
            .find(|id| !self.path_for(id).exists())
            .expect("unbounded search")
    }
}
