//! The assembled workbench: dataset, masks, checkpoints, caches and the task
//! center behind one handle shared by the HTTP server and the CLI.
//!
//! Inference (listing, saliency, influence look-ups) always reads the active
//! checkpoint snapshot; jobs run on the task-center worker and never swap the
//! active checkpoint themselves.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::annotation::segment::SegmentationParams;
use crate::annotation::{MaskError, MaskStore, PixelMask, RangeFilterSpec, SegmentationRegistry};
use crate::config::{AppConfig, ConfigError, InputShape};
use crate::dataset::{
    Dataset, DatasetConfig, DatasetError, ImageRecord, ListFilter, PredictionCache, PredictionSummary, PredictionTable,
    Split,
};
use crate::influence::{InfluenceCache, InfluenceEngine, InfluenceError, InfluenceResult, InfluenceSolverConfig};
use crate::model::{argmax, backend_from_config, Checkpoint, CheckpointStore, ModelBackend, ModelError, Sample};
use crate::paired::{
    run_paired_training, EpochMetrics, PairedError, TrainItem, TrainingData, TrainingJobConfig, TrainingObserver,
};
use crate::saliency::{compute_saliency, render_saliency_overlay, SaliencyError, SaliencyMap};
use crate::tasks::{RunOutcome, TaskCenter, TaskContext, TaskError, TaskExecutor, TaskKind, TaskRecord};

pub const ZERO_CHECKPOINT_ID: &str = "zero-init";

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Paired(#[from] PairedError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("image `{0}` is not in the test split")]
    NotTestImage(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkbenchError + '_ {
    move |source| WorkbenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkbenchPaths {
    pub data_root: PathBuf,
    pub mask_root: PathBuf,
    pub influence_root: PathBuf,
    pub ckpt_root: PathBuf,
    pub cache_root: PathBuf,
}

impl WorkbenchPaths {
    /// All five roots as siblings under `base` (`data`, `masks`, `influence`,
    /// `checkpoints`, `cache`).
    pub fn under(base: &Path) -> Self {
        Self {
            data_root: base.join("data"),
            mask_root: base.join("masks"),
            influence_root: base.join("influence"),
            ckpt_root: base.join("checkpoints"),
            cache_root: base.join("cache"),
        }
    }

    pub fn metrics_path(&self, job_id: &str) -> PathBuf {
        self.cache_root.join("jobs").join(format!("{job_id}.metrics.jsonl"))
    }
}

/// Cooperative progress/cancellation hooks for long operations.
pub trait JobControl {
    fn progress(&self, _fraction: f64) {}
    fn cancelled(&self) -> bool {
        false
    }
}

pub struct Uncontrolled;

impl JobControl for Uncontrolled {}

impl JobControl for TaskContext {
    fn progress(&self, fraction: f64) {
        self.set_progress(fraction);
    }

    fn cancelled(&self) -> bool {
        self.is_cancelled()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Meta {
    pub class_names: Vec<String>,
    #[serde(with = "crate::config::shape_triple")]
    pub input_shape: InputShape,
    pub active_checkpoint_id: String,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageView {
    #[serde(flatten)]
    pub record: ImageRecord,
    pub prediction: Option<PredictionSummary>,
    pub has_mask: bool,
    pub has_influence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageListing {
    pub items: Vec<ImageView>,
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    /// Predictions come from a checkpoint other than the active one.
    pub stale: bool,
    pub predictions_checkpoint_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InfluenceScope {
    #[default]
    MisclassifiedOnly,
    AllTest,
}

impl std::str::FromStr for InfluenceScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "misclassified_only" => Ok(Self::MisclassifiedOnly),
            "all_test" => Ok(Self::AllTest),
            other => Err(format!(
                "unknown scope `{other}` (expected misclassified_only or all_test)"
            )),
        }
    }
}

/// Payload of an `influence` job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InfluenceJobPayload {
    #[serde(default)]
    pub scope: InfluenceScope,
    #[serde(default)]
    pub config: InfluenceSolverConfig,
    /// Explicit test images; overrides `scope` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_image_ids: Option<Vec<String>>,
}

/// Payload of a `predict` job; `null` scores the active checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PredictJobPayload {
    #[serde(default)]
    pub checkpoint_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputeOutcome {
    pub processed: usize,
    pub in_scope: usize,
    pub cancelled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    /// `None` when cancelled before the first epoch finished.
    pub checkpoint_id: Option<String>,
    pub metrics: Vec<EpochMetrics>,
    pub cancelled: bool,
}

#[derive(Default)]
struct PredictionState {
    tables: HashMap<String, Arc<PredictionTable>>,
    latest: Option<String>,
}

pub struct Workbench {
    paths: WorkbenchPaths,
    config: AppConfig,
    backend: Arc<dyn ModelBackend>,
    dataset: Arc<Dataset>,
    masks: MaskStore,
    segmentation: SegmentationRegistry,
    checkpoints: CheckpointStore,
    influence_cache: InfluenceCache,
    prediction_cache: PredictionCache,
    predictions: RwLock<PredictionState>,
    active: RwLock<Arc<Checkpoint>>,
    influence_defaults: RwLock<InfluenceSolverConfig>,
    tasks: TaskCenter,
}

impl std::fmt::Debug for Workbench {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workbench")
            .field("paths", &self.paths)
            .field("active", &self.active_checkpoint_id())
            .finish_non_exhaustive()
    }
}

impl Workbench {
    /// Ingests the dataset, opens the stores and starts the task worker.
    /// Without `checkpoint`, an all-zero checkpoint is created (or reused)
    /// under the id [`ZERO_CHECKPOINT_ID`].
    pub fn open(
        paths: WorkbenchPaths,
        config: AppConfig,
        checkpoint: Option<&str>,
    ) -> Result<Arc<Self>, WorkbenchError> {
        for dir in [
            &paths.mask_root,
            &paths.influence_root,
            &paths.ckpt_root,
            &paths.cache_root,
        ] {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let backend = backend_from_config(&config)?;
        let dataset = Arc::new(Dataset::ingest(
            &paths.data_root,
            DatasetConfig {
                class_names: config.class_names.clone(),
                input_shape: Some(config.input_shape),
            },
        )?);
        let masks = MaskStore::open(&paths.mask_root, dataset.clone())?;
        let checkpoints = CheckpointStore::new(&paths.ckpt_root);
        let desc = backend.descriptor();
        let active = match checkpoint {
            Some(id) => checkpoints.load(id, desc)?,
            None => match checkpoints.load(ZERO_CHECKPOINT_ID, desc) {
                Ok(c) if c.parameters.iter().all(|&p| p == 0.0) => c,
                _ => {
                    let id = checkpoints.fresh_id(ZERO_CHECKPOINT_ID);
                    let c = Checkpoint::zeros(id, desc);
                    checkpoints.save(&c)?;
                    c
                }
            },
        };
        let wb = Arc::new(Workbench {
            segmentation: SegmentationRegistry::with_plugins(&config.segmentation_plugins),
            influence_cache: InfluenceCache::new(&paths.influence_root),
            prediction_cache: PredictionCache::new(&paths.cache_root),
            predictions: RwLock::new(PredictionState::default()),
            active: RwLock::new(Arc::new(active)),
            influence_defaults: RwLock::new(InfluenceSolverConfig::default()),
            tasks: TaskCenter::open(&paths.cache_root)?,
            paths,
            config,
            backend,
            dataset,
            masks,
            checkpoints,
        });
        wb.tasks.start(&wb);
        Ok(wb)
    }

    pub fn paths(&self) -> &WorkbenchPaths {
        &self.paths
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    pub fn backend(&self) -> &dyn ModelBackend {
        self.backend.as_ref()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn masks(&self) -> &MaskStore {
        &self.masks
    }

    pub fn tasks(&self) -> &TaskCenter {
        &self.tasks
    }

    pub fn checkpoints(&self) -> &CheckpointStore {
        &self.checkpoints
    }

    pub fn influence_cache(&self) -> &InfluenceCache {
        &self.influence_cache
    }

    pub fn segmentation_backends(&self) -> Vec<String> {
        self.segmentation.names()
    }

    pub fn meta(&self) -> Meta {
        Meta {
            class_names: self.config.class_names.clone(),
            input_shape: self.config.input_shape,
            active_checkpoint_id: self.active_checkpoint_id(),
            backend: self.backend.descriptor().backend_name.clone(),
        }
    }

    pub fn active_checkpoint(&self) -> Arc<Checkpoint> {
        self.active.read().unwrap().clone()
    }

    pub fn active_checkpoint_id(&self) -> String {
        self.active.read().unwrap().checkpoint_id.clone()
    }

    /// Atomically makes `checkpoint_id` the model used for inference.
    pub fn activate(&self, checkpoint_id: &str) -> Result<Arc<Checkpoint>, WorkbenchError> {
        let ckpt = Arc::new(self.checkpoints.load(checkpoint_id, self.backend.descriptor())?);
        *self.active.write().unwrap() = ckpt.clone();
        Ok(ckpt)
    }

    pub fn list_checkpoints(&self) -> Result<Vec<Checkpoint>, WorkbenchError> {
        Ok(self.checkpoints.list()?)
    }

    pub fn influence_defaults(&self) -> InfluenceSolverConfig {
        *self.influence_defaults.read().unwrap()
    }

    pub fn set_influence_defaults(&self, cfg: InfluenceSolverConfig) -> Result<(), WorkbenchError> {
        cfg.validate()?;
        *self.influence_defaults.write().unwrap() = cfg;
        Ok(())
    }

    fn load_checkpoint(&self, checkpoint_id: &str) -> Result<Arc<Checkpoint>, WorkbenchError> {
        let active = self.active_checkpoint();
        if active.checkpoint_id == checkpoint_id {
            return Ok(active);
        }
        Ok(Arc::new(
            self.checkpoints.load(checkpoint_id, self.backend.descriptor())?,
        ))
    }

    // ---- predictions ----

    /// Scores every image with `checkpoint_id` (default: active) and
    /// persists the table. Returns the number of images scored.
    pub fn refresh_predictions(&self, checkpoint_id: Option<&str>) -> Result<usize, WorkbenchError> {
        let ckpt = match checkpoint_id {
            Some(id) => self.load_checkpoint(id)?,
            None => self.active_checkpoint(),
        };
        let table = self
            .dataset
            .score_predictions(self.backend.as_ref(), &ckpt.parameters, &ckpt.checkpoint_id)?;
        self.prediction_cache.save(&table)?;
        let n = table.entries.len();
        let mut st = self.predictions.write().unwrap();
        st.tables.insert(ckpt.checkpoint_id.clone(), Arc::new(table));
        st.latest = Some(ckpt.checkpoint_id.clone());
        Ok(n)
    }

    /// Cached predictions of one checkpoint (memory, then disk).
    pub fn predictions_for(&self, checkpoint_id: &str) -> Result<Option<Arc<PredictionTable>>, WorkbenchError> {
        if let Some(t) = self.predictions.read().unwrap().tables.get(checkpoint_id) {
            return Ok(Some(t.clone()));
        }
        if !crate::fsutil::is_valid_identifier(checkpoint_id) {
            return Ok(None);
        }
        let Some(table) = self.prediction_cache.load(checkpoint_id)? else {
            return Ok(None);
        };
        let table = Arc::new(table);
        let mut st = self.predictions.write().unwrap();
        st.tables.insert(checkpoint_id.to_string(), table.clone());
        st.latest.get_or_insert_with(|| checkpoint_id.to_string());
        Ok(Some(table))
    }

    /// Active predictions, or the most recent ones of another checkpoint
    /// flagged stale.
    fn current_predictions(&self) -> Result<(Option<Arc<PredictionTable>>, bool), WorkbenchError> {
        if let Some(t) = self.predictions_for(&self.active_checkpoint_id())? {
            return Ok((Some(t), false));
        }
        let st = self.predictions.read().unwrap();
        Ok(match st.latest.as_ref().and_then(|id| st.tables.get(id)) {
            Some(t) => (Some(t.clone()), true),
            None => (None, false),
        })
    }

    pub fn list_images(
        &self,
        split: Split,
        page: usize,
        page_size: usize,
        filter: ListFilter,
    ) -> Result<ImageListing, WorkbenchError> {
        if page_size == 0 {
            return Err(WorkbenchError::InvalidRequest("page_size must be >= 1".into()));
        }
        let (table, stale) = self.current_predictions()?;
        let annotated = self.masks.annotated_set();
        let page_data = self
            .dataset
            .list_images(split, page, page_size, filter, table.as_deref(), Some(&annotated))?;
        let active = self.active_checkpoint_id();
        let items = page_data
            .items
            .into_iter()
            .map(|li| {
                let id = li.record.image_id.clone();
                ImageView {
                    has_mask: self.masks.has_mask(&id),
                    has_influence: li.record.split == Split::Test && self.influence_cache.exists(&active, &id),
                    record: li.record,
                    prediction: li.prediction,
                }
            })
            .collect();
        Ok(ImageListing {
            items,
            total: page_data.total,
            page,
            page_size,
            stale,
            predictions_checkpoint_id: table.map(|t| t.checkpoint_id.clone()),
        })
    }

    pub fn image(&self, image_id: &str) -> Result<ImageView, WorkbenchError> {
        let record = self.dataset.record(image_id)?.clone();
        let (table, _) = self.current_predictions()?;
        Ok(ImageView {
            prediction: table.and_then(|t| t.summary(image_id)),
            has_mask: self.masks.has_mask(image_id),
            has_influence: record.split == Split::Test
                && self.influence_cache.exists(&self.active_checkpoint_id(), image_id),
            record,
        })
    }

    pub fn image_bytes(&self, image_id: &str) -> Result<(Vec<u8>, &'static str), WorkbenchError> {
        Ok(self.dataset.image_bytes(image_id)?)
    }

    // ---- saliency ----

    /// Saliency under the active checkpoint; `class_index` defaults to the
    /// predicted class.
    pub fn saliency(&self, image_id: &str, class_index: Option<usize>) -> Result<SaliencyMap, WorkbenchError> {
        let ckpt = self.active_checkpoint();
        let input = self.dataset.tensor(image_id)?;
        let class = match class_index {
            Some(c) => c,
            None => argmax(&self.backend.forward(&ckpt.parameters, input)?),
        };
        Ok(compute_saliency(
            self.backend.as_ref(),
            &ckpt.parameters,
            &ckpt.checkpoint_id,
            image_id,
            input,
            class,
        )?)
    }

    pub fn saliency_overlay(
        &self,
        image_id: &str,
        class_index: Option<usize>,
        alpha: f64,
    ) -> Result<Vec<u8>, WorkbenchError> {
        let map = self.saliency(image_id, class_index)?;
        let original = self.dataset.original_tensor(image_id)?;
        Ok(render_saliency_overlay(&original, &map, alpha)?)
    }

    // ---- masks ----

    pub fn load_mask(&self, image_id: &str) -> Result<Option<PixelMask>, WorkbenchError> {
        Ok(self.masks.load_mask(image_id)?)
    }

    pub fn save_mask(&self, mask: &PixelMask) -> Result<u64, WorkbenchError> {
        Ok(self.masks.save_mask(mask)?)
    }

    /// Mask preview from `"range"` (params: a [`RangeFilterSpec`]) or a
    /// segmentation backend. Nothing is persisted.
    pub fn propose_mask(
        &self,
        image_id: &str,
        method: &str,
        params: &SegmentationParams,
    ) -> Result<PixelMask, WorkbenchError> {
        if method == "range" {
            let spec: RangeFilterSpec = serde_json::from_value(Value::Object(params.clone().into_iter().collect()))
                .map_err(|e| WorkbenchError::InvalidRequest(format!("range params: {e}")))?;
            return Ok(self.masks.propose_range(image_id, &spec)?);
        }
        let path = self.dataset.image_path(image_id)?;
        let image = self.dataset.original_tensor(image_id)?;
        Ok(self.segmentation.propose(method, image_id, &image, &path, params)?)
    }

    // ---- influence ----

    fn require_test(&self, image_id: &str) -> Result<(), WorkbenchError> {
        if self.dataset.record(image_id)?.split != Split::Test {
            return Err(WorkbenchError::NotTestImage(image_id.to_string()));
        }
        Ok(())
    }

    fn engine<'a>(
        &'a self,
        ckpt: &'a Checkpoint,
        cfg: InfluenceSolverConfig,
    ) -> Result<InfluenceEngine<'a>, WorkbenchError> {
        let train = self
            .dataset
            .split_records(Split::Train)
            .map(|r| {
                let input = self.dataset.tensor(&r.image_id)?;
                Ok((
                    r.image_id.clone(),
                    Sample {
                        input,
                        label: r.class_label,
                    },
                ))
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        Ok(InfluenceEngine::new(
            self.backend.as_ref(),
            &ckpt.parameters,
            &ckpt.checkpoint_id,
            train,
            cfg,
        )?)
    }

    fn test_sample(&self, image_id: &str) -> Result<Sample<'_>, WorkbenchError> {
        let rec = self.dataset.record(image_id)?;
        Ok(Sample {
            input: self.dataset.tensor(image_id)?,
            label: rec.class_label,
        })
    }

    /// Cached influence for the active checkpoint. With `compute`, a missing
    /// result is computed with the default solver settings and cached.
    pub fn influence(&self, test_image_id: &str, compute: bool) -> Result<Option<InfluenceResult>, WorkbenchError> {
        self.require_test(test_image_id)?;
        let ckpt = self.active_checkpoint();
        if let Some(r) = self.influence_cache.load(&ckpt.checkpoint_id, test_image_id)? {
            return Ok(Some(r));
        }
        if !compute {
            return Ok(None);
        }
        let engine = self.engine(&ckpt, self.influence_defaults())?;
        let result = engine.influence_scores(test_image_id, self.test_sample(test_image_id)?)?;
        self.influence_cache.save(&result)?;
        Ok(Some(result))
    }

    /// Fresh (uncached) influence scores under an explicit configuration.
    pub fn influence_scores(
        &self,
        test_image_id: &str,
        cfg: InfluenceSolverConfig,
    ) -> Result<InfluenceResult, WorkbenchError> {
        self.require_test(test_image_id)?;
        let ckpt = self.active_checkpoint();
        let engine = self.engine(&ckpt, cfg)?;
        Ok(engine.influence_scores(test_image_id, self.test_sample(test_image_id)?)?)
    }

    /// Test images in `scope` for the active checkpoint. Predictions are
    /// computed first when the scope needs them and none are cached.
    pub fn influence_scope(&self, scope: InfluenceScope) -> Result<Vec<String>, WorkbenchError> {
        let test = self.dataset.split_records(Split::Test);
        Ok(match scope {
            InfluenceScope::AllTest => test.map(|r| r.image_id.clone()).collect(),
            InfluenceScope::MisclassifiedOnly => {
                let active = self.active_checkpoint_id();
                let table = match self.predictions_for(&active)? {
                    Some(t) => t,
                    None => {
                        self.refresh_predictions(Some(&active))?;
                        self.predictions_for(&active)?
                            .ok_or(DatasetError::PredictionsUnavailable)?
                    }
                };
                test.filter(|r| table.entries.get(&r.image_id).is_some_and(|e| !e.correct))
                    .map(|r| r.image_id.clone())
                    .collect()
            }
        })
    }

    /// Writes one cache file per test image; stops between images when
    /// cancelled, leaving only complete files behind.
    pub fn precompute_influence(
        &self,
        test_image_ids: &[String],
        cfg: InfluenceSolverConfig,
        control: &dyn JobControl,
    ) -> Result<PrecomputeOutcome, WorkbenchError> {
        for id in test_image_ids {
            self.require_test(id)?;
        }
        let ckpt = self.active_checkpoint();
        let mut outcome = PrecomputeOutcome {
            processed: 0,
            in_scope: test_image_ids.len(),
            cancelled: false,
        };
        if test_image_ids.is_empty() {
            return Ok(outcome);
        }
        let engine = self.engine(&ckpt, cfg)?;
        for id in test_image_ids {
            if control.cancelled() {
                outcome.cancelled = true;
                break;
            }
            let result = engine.influence_scores(id, self.test_sample(id)?)?;
            self.influence_cache.save(&result)?;
            outcome.processed += 1;
            control.progress(outcome.processed as f64 / test_image_ids.len() as f64);
        }
        Ok(outcome)
    }

    // ---- training ----

    /// Paired training from `cfg.base_checkpoint_id`. Metrics go to
    /// `<cache_root>/jobs/<job_id>.metrics.jsonl`; the result is saved as
    /// checkpoint `ckpt-<job_id>` with `parent_job_id = job_id`.
    pub fn run_training(
        &self,
        job_id: &str,
        cfg: &TrainingJobConfig,
        control: &dyn JobControl,
    ) -> Result<TrainingRun, WorkbenchError> {
        cfg.validate()?;
        if !crate::fsutil::is_valid_identifier(job_id) {
            return Err(WorkbenchError::InvalidRequest(format!("bad job id `{job_id}`")));
        }
        let base = self.load_checkpoint(&cfg.base_checkpoint_id)?;
        let train_records: Vec<&ImageRecord> = self.dataset.split_records(Split::Train).collect();
        let masks = train_records
            .iter()
            .map(|r| self.masks.load_mask(&r.image_id))
            .collect::<Result<Vec<_>, _>>()?;
        let data = TrainingData {
            train: train_records
                .iter()
                .zip(&masks)
                .map(|(r, m)| {
                    Ok(TrainItem {
                        input: self.dataset.tensor(&r.image_id)?,
                        label: r.class_label,
                        mask: m.as_ref(),
                    })
                })
                .collect::<Result<_, DatasetError>>()?,
            test: self
                .dataset
                .split_records(Split::Test)
                .map(|r| {
                    Ok(Sample {
                        input: self.dataset.tensor(&r.image_id)?,
                        label: r.class_label,
                    })
                })
                .collect::<Result<_, DatasetError>>()?,
        };

        let metrics_path = self.paths.metrics_path(job_id);
        if let Some(dir) = metrics_path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = File::create(&metrics_path).map_err(io_err(&metrics_path))?;
        let mut observer = MetricsObserver {
            control,
            file,
            path: &metrics_path,
            total_batches: cfg.epochs * data.train.len().div_ceil(cfg.batch_size),
            done_batches: 0,
            write_error: None,
        };
        let outcome = run_paired_training(self.backend.as_ref(), &base.parameters, &data, cfg, &mut observer);
        if let Some(e) = observer.write_error.take() {
            return Err(e);
        }
        let outcome = outcome?;
        if outcome.metrics.is_empty() {
            return Ok(TrainingRun {
                checkpoint_id: None,
                metrics: outcome.metrics,
                cancelled: outcome.cancelled,
            });
        }
        let tag = if outcome.cancelled {
            format!("paired training, cancelled after epoch {}", outcome.metrics.len())
        } else {
            "paired training".to_string()
        };
        let id = self.checkpoints.fresh_id(&format!("ckpt-{job_id}"));
        let ckpt = Checkpoint::new(
            id.clone(),
            self.backend.descriptor(),
            outcome.parameters,
            tag,
            Some(job_id.to_string()),
        );
        self.checkpoints.save(&ckpt)?;
        Ok(TrainingRun {
            checkpoint_id: Some(id),
            metrics: outcome.metrics,
            cancelled: outcome.cancelled,
        })
    }
}

struct MetricsObserver<'a> {
    control: &'a dyn JobControl,
    file: File,
    path: &'a Path,
    total_batches: usize,
    done_batches: usize,
    write_error: Option<WorkbenchError>,
}

impl TrainingObserver for MetricsObserver<'_> {
    fn on_batch(&mut self, _epoch: usize, _batch: usize, _num_batches: usize) {
        self.done_batches += 1;
        self.control
            .progress(self.done_batches as f64 / self.total_batches.max(1) as f64);
    }

    fn on_epoch(&mut self, metrics: &EpochMetrics) {
        let line = serde_json::to_string(metrics).expect("metrics serialize");
        if let Err(e) = writeln!(self.file, "{line}").and_then(|_| self.file.flush()) {
            self.write_error.get_or_insert(WorkbenchError::Io {
                path: self.path.to_path_buf(),
                source: e,
            });
        }
    }

    fn should_cancel(&self) -> bool {
        self.write_error.is_some() || self.control.cancelled()
    }
}

fn parse_payload<T: for<'de> Deserialize<'de> + Default>(payload: &Value) -> Result<T, String> {
    if payload.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(payload.clone()).map_err(|e| e.to_string())
}

impl TaskExecutor for Workbench {
    fn validate(&self, kind: TaskKind, payload: &Value) -> Result<(), String> {
        match kind {
            TaskKind::Train => {
                let cfg: TrainingJobConfig = serde_json::from_value(payload.clone()).map_err(|e| e.to_string())?;
                cfg.validate().map_err(|e| e.to_string())?;
                if !self.checkpoints.exists(&cfg.base_checkpoint_id) {
                    return Err(ModelError::UnknownCheckpoint(cfg.base_checkpoint_id).to_string());
                }
            }
            TaskKind::Influence => {
                let p: InfluenceJobPayload = parse_payload(payload)?;
                p.config.validate().map_err(|e| e.to_string())?;
                for id in p.test_image_ids.iter().flatten() {
                    self.require_test(id).map_err(|e| e.to_string())?;
                }
            }
            TaskKind::Predict => {
                let p: PredictJobPayload = parse_payload(payload)?;
                if let Some(id) = p.checkpoint_id {
                    if !self.checkpoints.exists(&id) {
                        return Err(ModelError::UnknownCheckpoint(id).to_string());
                    }
                }
            }
        }
        Ok(())
    }

    fn run(&self, job: &TaskRecord, ctx: &TaskContext) -> Result<RunOutcome, String> {
        let result = match job.kind {
            TaskKind::Train => (|| {
                let cfg: TrainingJobConfig = serde_json::from_value(job.payload.clone())
                    .map_err(|e| WorkbenchError::InvalidRequest(e.to_string()))?;
                let run = self.run_training(&job.job_id, &cfg, ctx)?;
                let last = run.metrics.last();
                Ok(RunOutcome {
                    message: match (last, last.and_then(|m| m.test_acc)) {
                        (Some(m), Some(acc)) => format!("epoch {}/{}, test_acc {acc:.4}", m.epoch + 1, cfg.epochs),
                        (Some(m), None) => format!("epoch {}/{}", m.epoch + 1, cfg.epochs),
                        (None, _) => "no epoch completed".to_string(),
                    },
                    result_ref: run.checkpoint_id,
                    cancelled: run.cancelled,
                })
            })(),
            TaskKind::Influence => (|| {
                let p: InfluenceJobPayload = parse_payload(&job.payload).map_err(WorkbenchError::InvalidRequest)?;
                let ids = match p.test_image_ids {
                    Some(ids) => ids,
                    None => self.influence_scope(p.scope)?,
                };
                let out = self.precompute_influence(&ids, p.config, ctx)?;
                Ok(RunOutcome {
                    result_ref: Some(self.active_checkpoint_id()),
                    message: format!("{} of {} test images", out.processed, out.in_scope),
                    cancelled: out.cancelled,
                })
            })(),
            TaskKind::Predict => (|| {
                let p: PredictJobPayload = parse_payload(&job.payload).map_err(WorkbenchError::InvalidRequest)?;
                let id = p.checkpoint_id.unwrap_or_else(|| self.active_checkpoint_id());
                let n = self.refresh_predictions(Some(&id))?;
                Ok(RunOutcome {
                    result_ref: Some(id),
                    message: format!("{n} images scored"),
                    cancelled: false,
                })
            })(),
        };
        result.map_err(|e: WorkbenchError| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{spurious_patch, SpuriousPatchSpec};
    use crate::tasks::TaskStatus;
    use std::time::Duration;

    fn fixture(n_train: usize, n_test: usize) -> (tempfile::TempDir, WorkbenchPaths, AppConfig) {
        let dir = tempfile::tempdir().unwrap();
        let paths = WorkbenchPaths::under(dir.path());
        let spec = SpuriousPatchSpec {
            size: 10,
            n_train,
            n_test,
            patch: 1,
            ..Default::default()
        };
        let d = spurious_patch(&spec);
        d.write_tree(&paths.data_root).unwrap();
        let config = AppConfig::from_value(d.config_json()).unwrap();
        (dir, paths, config)
    }

    #[test]
    fn opens_with_zero_checkpoint_and_lists() {
        let (_d, paths, config) = fixture(6, 4);
        let wb = Workbench::open(paths.clone(), config.clone(), None).unwrap();
        assert_eq!(wb.active_checkpoint_id(), ZERO_CHECKPOINT_ID);
        let page = wb.list_images(Split::Train, 0, 4, ListFilter::All).unwrap();
        assert_eq!((page.items.len(), page.total), (4, 6));
        assert!(page.items[0].prediction.is_none());
        assert!(matches!(
            wb.list_images(Split::Test, 0, 4, ListFilter::Misclassified),
            Err(WorkbenchError::Dataset(DatasetError::PredictionsUnavailable))
        ));
        assert_eq!(wb.refresh_predictions(None).unwrap(), 10);
        let page = wb.list_images(Split::Test, 0, 10, ListFilter::All).unwrap();
        assert!(!page.stale);
        for item in &page.items {
            assert_eq!(item.prediction.as_ref().unwrap().probabilities, vec![0.5, 0.5]);
        }
        drop(wb);
        // reopening reuses the zero checkpoint and the cached predictions
        let wb = Workbench::open(paths, config, None).unwrap();
        assert_eq!(wb.list_checkpoints().unwrap().len(), 1);
        assert!(!wb.list_images(Split::Test, 0, 10, ListFilter::All).unwrap().items[0]
            .prediction
            .is_none());
        assert!(matches!(
            Workbench::open(wb.paths().clone(), wb.config().clone(), Some("nope")),
            Err(WorkbenchError::Model(ModelError::UnknownCheckpoint(_)))
        ));
    }

    #[test]
    fn training_job_end_to_end() {
        let (_d, paths, config) = fixture(8, 4);
        let wb = Workbench::open(paths.clone(), config, None).unwrap();
        let payload = serde_json::json!({
            "base_checkpoint_id": ZERO_CHECKPOINT_ID,
            "epochs": 2, "batch_size": 4, "learning_rate": 0.5, "seed": 3
        });
        let bad = serde_json::json!({
            "base_checkpoint_id": ZERO_CHECKPOINT_ID,
            "epochs": 2, "batch_size": 4, "learning_rate": -0.5
        });
        assert!(matches!(
            wb.tasks().submit(TaskKind::Train, bad),
            Err(TaskError::InvalidPayload(_))
        ));
        let job = wb.tasks().submit(TaskKind::Train, payload).unwrap();
        let rec = wb.tasks().wait(&job, Duration::from_secs(30)).unwrap();
        assert_eq!(rec.status, TaskStatus::Done, "{}", rec.message);
        let ckpt_id = rec.result_ref.unwrap();
        assert_eq!(ckpt_id, format!("ckpt-{job}"));
        let ckpt = wb.checkpoints().load(&ckpt_id, wb.backend().descriptor()).unwrap();
        assert_eq!(ckpt.metadata.parent_job_id.as_deref(), Some(job.as_str()));
        let metrics = fs::read_to_string(paths.metrics_path(&job)).unwrap();
        assert_eq!(metrics.lines().count(), 2);

        // activation marks listings stale until a predict job runs
        wb.refresh_predictions(None).unwrap();
        wb.activate(&ckpt_id).unwrap();
        assert_eq!(wb.meta().active_checkpoint_id, ckpt_id);
        assert!(wb.list_images(Split::Test, 0, 4, ListFilter::All).unwrap().stale);
        let p = wb.tasks().submit(TaskKind::Predict, Value::Null).unwrap();
        assert_eq!(
            wb.tasks().wait(&p, Duration::from_secs(30)).unwrap().status,
            TaskStatus::Done
        );
        let listing = wb.list_images(Split::Test, 0, 4, ListFilter::All).unwrap();
        assert!(!listing.stale);
        assert_eq!(listing.predictions_checkpoint_id.as_deref(), Some(ckpt_id.as_str()));
    }

    #[test]
    fn influence_cache_and_split_rule() {
        let (_d, paths, config) = fixture(6, 4);
        let wb = Workbench::open(paths, config, None).unwrap();
        let test_id = wb.dataset().split_records(Split::Test).next().unwrap().image_id.clone();
        let train_id = wb
            .dataset()
            .split_records(Split::Train)
            .next()
            .unwrap()
            .image_id
            .clone();
        assert!(matches!(
            wb.influence(&train_id, false),
            Err(WorkbenchError::NotTestImage(_))
        ));
        assert_eq!(wb.influence(&test_id, false).unwrap(), None);
        let computed = wb.influence(&test_id, true).unwrap().unwrap();
        assert_eq!(wb.influence(&test_id, false).unwrap().unwrap(), computed);
        assert_eq!(
            wb.influence_scores(&test_id, wb.influence_defaults()).unwrap(),
            computed
        );

        let all = wb.influence_scope(InfluenceScope::AllTest).unwrap();
        let out = wb
            .precompute_influence(&all, InfluenceSolverConfig::default(), &Uncontrolled)
            .unwrap();
        assert_eq!(out.processed, 4);
        // zero model: all predictions tie at class 0, so class-1 images are misclassified
        assert_eq!(wb.influence_scope(InfluenceScope::MisclassifiedOnly).unwrap().len(), 2);
    }

    #[test]
    fn proposals_do_not_persist() {
        let (_d, paths, config) = fixture(4, 2);
        let wb = Workbench::open(paths, config, None).unwrap();
        let id = wb
            .dataset()
            .split_records(Split::Train)
            .next()
            .unwrap()
            .image_id
            .clone();
        let params: SegmentationParams = serde_json::from_value(serde_json::json!({"lo": 0.0, "hi": 1.0})).unwrap();
        let m = wb.propose_mask(&id, "range", &params).unwrap();
        assert_eq!(m.count_ones(), 100);
        let m = wb
            .propose_mask(&id, "border-flood", &SegmentationParams::new())
            .unwrap();
        assert_eq!(m.bits.len(), 100);
        assert!(wb.load_mask(&id).unwrap().is_none());
        assert!(matches!(
            wb.propose_mask(&id, "missing", &SegmentationParams::new()),
            Err(WorkbenchError::Mask(MaskError::UnknownBackend(_)))
        ));
    }
}
