//! Class-per-directory dataset ingestion, browsing and the prediction cache.
//!
//! Layout: `<data_root>/{train,test}/<class_name>/<file>.{png,jpg,jpeg}`.
//! Every image is keyed by its split-qualified POSIX path relative to the
//! data root (`train/cat/001.png`), which also keys masks and caches.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::InputShape;
use crate::fsutil::{is_safe_relative, write_atomic};
use crate::model::{argmax, softmax, ModelBackend, ModelError};
use crate::tensor::ImageTensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root has no `{0}/` directory")]
    MissingSplit(String),
    #[error("directory `{0}` is not a configured class")]
    UnknownClassDirectory(String),
    #[error("cannot decode image `{path}`: {reason}")]
    UndecodableImage { path: String, reason: String },
    #[error("image `{path}` is {actual_h}x{actual_w}, expected {expected_h}x{expected_w}")]
    DimensionMismatch {
        path: String,
        expected_h: usize,
        expected_w: usize,
        actual_h: usize,
        actual_w: usize,
    },
    #[error("unknown image id `{0}`")]
    UnknownImageId(String),
    #[error("predictions for the active checkpoint are not available")]
    PredictionsUnavailable,
    #[error("prediction cache `{path}` is corrupt: {reason}")]
    CorruptPredictionCache { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub split: Split,
    pub class_label: usize,
    pub relative_path: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub image_id: String,
    pub predicted_label: usize,
    pub probabilities: Vec<f64>,
    pub correct: bool,
    pub checkpoint_id: String,
}

/// One row of the on-disk prediction cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub predicted_label: usize,
    pub probabilities: Vec<f64>,
    pub correct: bool,
}

/// All predictions of one checkpoint, keyed by image id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionTable {
    pub checkpoint_id: String,
    pub entries: BTreeMap<String, PredictionEntry>,
}

impl PredictionTable {
    pub fn summary(&self, image_id: &str) -> Option<PredictionSummary> {
        self.entries.get(image_id).map(|e| PredictionSummary {
            image_id: image_id.to_string(),
            predicted_label: e.predicted_label,
            probabilities: e.probabilities.clone(),
            correct: e.correct,
            checkpoint_id: self.checkpoint_id.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ListFilter {
    #[default]
    All,
    Correct,
    Misclassified,
    Annotated,
}

impl std::str::FromStr for ListFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(ListFilter::All),
            "correct" => Ok(ListFilter::Correct),
            "misclassified" => Ok(ListFilter::Misclassified),
            "annotated" => Ok(ListFilter::Annotated),
            other => Err(format!("unknown filter `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ListedImage {
    pub record: ImageRecord,
    pub prediction: Option<PredictionSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePage {
    pub items: Vec<ListedImage>,
    pub total: usize,
}

/// Ingestion settings: class order and the image size the model expects.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub class_names: Vec<String>,
    /// When set, every image must have this height/width and is converted to
    /// this channel count for the numeric engines.
    pub input_shape: Option<InputShape>,
}

/// An ingested dataset. Records are sorted by image id; model-ready tensors
/// are held in memory alongside them.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    config: DatasetConfig,
    records: Vec<ImageRecord>,
    tensors: Vec<ImageTensor>,
    index: HashMap<String, usize>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>, DatasetError> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    entries.retain(|e| !e.file_name().to_string_lossy().starts_with('.'));
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

impl Dataset {
    /// Walks the dataset tree and decodes every image.
    pub fn ingest(data_root: &Path, config: DatasetConfig) -> Result<Dataset, DatasetError> {
        let class_index: HashMap<&str, usize> = config
            .class_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut found: Vec<(String, Split, usize, PathBuf)> = Vec::new();
        for split in Split::ALL {
            let split_dir = data_root.join(split.dir_name());
            if !split_dir.is_dir() {
                return Err(DatasetError::MissingSplit(split.dir_name().to_string()));
            }
            for class_entry in sorted_entries(&split_dir)? {
                let path = class_entry.path();
                if !path.is_dir() {
                    continue;
                }
                let class_name = class_entry.file_name().to_string_lossy().into_owned();
                let Some(&label) = class_index.get(class_name.as_str()) else {
                    return Err(DatasetError::UnknownClassDirectory(format!(
                        "{}/{class_name}",
                        split.dir_name()
                    )));
                };
                for file in sorted_entries(&path)? {
                    let fpath = file.path();
                    if !fpath.is_file() || !is_image_file(&fpath) {
                        continue;
                    }
                    let id = format!(
                        "{}/{}/{}",
                        split.dir_name(),
                        class_name,
                        file.file_name().to_string_lossy()
                    );
                    found.push((id, split, label, fpath));
                }
            }
        }
        found.sort_by(|a, b| a.0.cmp(&b.0));

        let mut records = Vec::with_capacity(found.len());
        let mut tensors = Vec::with_capacity(found.len());
        for (image_id, split, class_label, path) in found {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let tensor = ImageTensor::decode(&bytes).map_err(|e| DatasetError::UndecodableImage {
                path: image_id.clone(),
                reason: e.to_string(),
            })?;
            if let Some(shape) = config.input_shape {
                if tensor.height != shape.height || tensor.width != shape.width {
                    return Err(DatasetError::DimensionMismatch {
                        path: image_id,
                        expected_h: shape.height,
                        expected_w: shape.width,
                        actual_h: tensor.height,
                        actual_w: tensor.width,
                    });
                }
            }
            records.push(ImageRecord {
                relative_path: image_id.clone(),
                image_id,
                split,
                class_label,
                width: tensor.width,
                height: tensor.height,
                channels: tensor.channels,
            });
            let model_ready = match config.input_shape {
                Some(shape) => tensor.to_channels(shape.channels),
                None => tensor,
            };
            tensors.push(model_ready);
        }
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_id.clone(), i))
            .collect();
        Ok(Dataset {
            root: data_root.to_path_buf(),
            config,
            records,
            tensors,
            index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn class_names(&self) -> &[String] {
        &self.config.class_names
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ImageRecord> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn record(&self, image_id: &str) -> Result<&ImageRecord, DatasetError> {
        self.index
            .get(image_id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| DatasetError::UnknownImageId(image_id.to_string()))
    }

    /// Model-ready tensor (converted to the configured channel count).
    pub fn tensor(&self, image_id: &str) -> Result<&ImageTensor, DatasetError> {
        self.index
            .get(image_id)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| DatasetError::UnknownImageId(image_id.to_string()))
    }

    /// Path of the image on disk. Ids are looked up, never joined blindly.
    pub fn image_path(&self, image_id: &str) -> Result<PathBuf, DatasetError> {
        let rec = self.record(image_id)?;
        debug_assert!(is_safe_relative(&rec.relative_path));
        Ok(self.root.join(&rec.relative_path))
    }

    /// Original file bytes with their content type.
    pub fn image_bytes(&self, image_id: &str) -> Result<(Vec<u8>, &'static str), DatasetError> {
        let path = self.image_path(image_id)?;
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let content_type = match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("png") => "image/png",
            _ => "image/jpeg",
        };
        Ok((bytes, content_type))
    }

    /// Re-decodes the file with its native channel count.
    pub fn original_tensor(&self, image_id: &str) -> Result<ImageTensor, DatasetError> {
        let (bytes, _) = self.image_bytes(image_id)?;
        ImageTensor::decode(&bytes).map_err(|e| DatasetError::UndecodableImage {
            path: image_id.to_string(),
            reason: e.to_string(),
        })
    }

    /// Filtered, paginated listing of one split. Pages past the end are empty
    /// but still report the total.
    pub fn list_images(
        &self,
        split: Split,
        page: usize,
        page_size: usize,
        filter: ListFilter,
        predictions: Option<&PredictionTable>,
        annotated: Option<&BTreeSet<String>>,
    ) -> Result<ImagePage, DatasetError> {
        let page_size = page_size.max(1);
        let matching: Vec<&ImageRecord> = match filter {
            ListFilter::All => self.split_records(split).collect(),
            ListFilter::Correct | ListFilter::Misclassified => {
                let table = predictions.ok_or(DatasetError::PredictionsUnavailable)?;
                let want_correct = filter == ListFilter::Correct;
                self.split_records(split)
                    .filter(|r| {
                        table
                            .entries
                            .get(&r.image_id)
                            .is_some_and(|e| e.correct == want_correct)
                    })
                    .collect()
            }
            ListFilter::Annotated => {
                let empty = BTreeSet::new();
                let set = annotated.unwrap_or(&empty);
                self.split_records(split)
                    .filter(|r| set.contains(&r.image_id))
                    .collect()
            }
        };
        let total = matching.len();
        let items = matching
            .into_iter()
            .skip(page.saturating_mul(page_size))
            .take(page_size)
            .map(|r| ListedImage {
                record: r.clone(),
                prediction: predictions.and_then(|t| t.summary(&r.image_id)),
            })
            .collect();
        Ok(ImagePage { items, total })
    }

    /// Scores every image of both splits with `params`.
    pub fn score_predictions(
        &self,
        backend: &dyn ModelBackend,
        params: &[f64],
        checkpoint_id: &str,
    ) -> Result<PredictionTable, DatasetError> {
        let mut entries = BTreeMap::new();
        for (rec, tensor) in self.records.iter().zip(&self.tensors) {
            let logits = backend.forward(params, tensor)?;
            let probabilities = softmax(&logits);
            let predicted_label = argmax(&probabilities);
            entries.insert(
                rec.image_id.clone(),
                PredictionEntry {
                    predicted_label,
                    probabilities,
                    correct: predicted_label == rec.class_label,
                },
            );
        }
        Ok(PredictionTable {
            checkpoint_id: checkpoint_id.to_string(),
            entries,
        })
    }
}

/// Prediction tables persisted at `<cache_root>/predictions/<checkpoint_id>.json`.
#[derive(Debug, Clone)]
pub struct PredictionCache {
    dir: PathBuf,
}

impl PredictionCache {
    pub fn new(cache_root: &Path) -> Self {
        Self {
            dir: cache_root.join("predictions"),
        }
    }

    pub fn path_for(&self, checkpoint_id: &str) -> PathBuf {
        self.dir.join(format!("{checkpoint_id}.json"))
    }

    pub fn save(&self, table: &PredictionTable) -> Result<(), DatasetError> {
        let path = self.path_for(&table.checkpoint_id);
        let bytes = serde_json::to_vec_pretty(&table.entries).expect("prediction table serializes");
        write_atomic(&path, &bytes).map_err(io_err(&path))
    }

    pub fn load(&self, checkpoint_id: &str) -> Result<Option<PredictionTable>, DatasetError> {
        let path = self.path_for(checkpoint_id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let entries = serde_json::from_slice(&bytes).map_err(|e| DatasetError::CorruptPredictionCache {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        Ok(Some(PredictionTable {
            checkpoint_id: checkpoint_id.to_string(),
            entries,
        }))
    }
}
