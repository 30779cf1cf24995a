//! Engines behind the despur annotation workbench.
//!
//! The crate is organised by subsystem: [`dataset`] ingests the
//! class-per-directory image tree and caches predictions, [`annotation`]
//! persists spurious-pixel masks and proposes new ones, [`model`] hosts the
//! backend abstraction with the multinomial logistic regression reference
//! backend, [`influence`] and [`saliency`] help the operator find what to
//! annotate, [`paired`] retrains with noise-replaced pixels under a logit
//! consistency penalty, and [`tasks`] serialises long-running jobs.
//! [`workbench::Workbench`] wires them together for the server and the CLI.

pub mod annotation;
pub mod config;
pub mod dataset;
pub mod fsutil;
pub mod influence;
pub mod model;
pub mod paired;
pub mod saliency;
pub mod synthetic;
pub mod tasks;
pub mod tensor;
pub mod workbench;

pub use annotation::{MaskStore, PixelMask, RangeFilterSpec};
pub use config::{AppConfig, InputShape};
pub use dataset::{Dataset, ImageRecord, ListFilter, PredictionSummary, Split};
pub use influence::{InfluenceResult, InfluenceSolverConfig, SolverKind};
pub use model::{Checkpoint, ModelBackend, ModelBackendDescriptor};
pub use paired::{PairedBatchLoss, TrainingJobConfig};
pub use saliency::SaliencyMap;
pub use tasks::{TaskCenter, TaskKind, TaskRecord, TaskStatus};
pub use tensor::ImageTensor;
pub use workbench::{Workbench, WorkbenchError, WorkbenchPaths};
