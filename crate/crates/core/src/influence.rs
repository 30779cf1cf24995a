//! Influence of training samples on a test sample's loss.
//!
//! For a test sample `t` the engine solves `(H + δI) s = ∇L(t)` once, where
//! `H` is the mean training-loss Hessian, and scores every training sample
//! `i` as `sᵀ ∇L(i)`. To first order, removing sample `i` from an `n`-sample
//! training set changes the test loss by `score / n`: a large positive score
//! marks a sample the current fit of `t` leans on.
//!
//! Results are cached as JSON at `<influence_root>/<checkpoint_id>/<test_image_id>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::{is_safe_relative, is_valid_identifier, write_atomic};
use crate::model::{loss_and_gradient, Capability, ModelBackend, ModelError, Sample};

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid influence configuration: {0}")]
    InvalidConfig(String),
    #[error("the training set is empty")]
    NoTrainingData,
    #[error("damped Hessian is not positive definite")]
    SingularSystem,
    #[error("influence cache {path} is corrupt: {reason}")]
    CorruptCacheFile { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    /// Dense Hessian with a Cholesky factorisation.
    #[default]
    Exact,
    /// Conjugate gradient on Hessian-vector products.
    Cg,
}

impl std::str::FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(SolverKind::Exact),
            "cg" => Ok(SolverKind::Cg),
            other => Err(format!("unknown solver `{other}` (expected exact or cg)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InfluenceSolverConfig {
    pub damping: f64,
    pub solver: SolverKind,
    pub cg_max_iters: usize,
    pub cg_tolerance: f64,
    pub k: usize,
}

impl Default for InfluenceSolverConfig {
    fn default() -> Self {
        Self {
            damping: 0.01,
            solver: SolverKind::Exact,
            cg_max_iters: 100,
            cg_tolerance: 1e-8,
            k: 8,
        }
    }
}

impl InfluenceSolverConfig {
    pub fn validate(&self) -> Result<(), InfluenceError> {
        if !(self.damping.is_finite() && self.damping > 0.0) {
            return Err(InfluenceError::InvalidConfig("damping must be > 0".into()));
        }
        if !(self.cg_tolerance.is_finite() && self.cg_tolerance > 0.0) {
            return Err(InfluenceError::InvalidConfig("cg_tolerance must be > 0".into()));
        }
        if self.k == 0 {
            return Err(InfluenceError::InvalidConfig("k must be >= 1".into()));
        }
        if self.solver == SolverKind::Cg && self.cg_max_iters == 0 {
            return Err(InfluenceError::InvalidConfig("cg_max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub train_image_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceResult {
    pub test_image_id: String,
    pub checkpoint_id: String,
    pub damping: f64,
    pub solver: SolverKind,
    pub k: usize,
    /// CG stopped at `cg_max_iters` above tolerance; scores are still returned.
    pub diverged: bool,
    /// Sorted by descending score.
    pub entries: Vec<InfluenceEntry>,
}

pub const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    test_image_id: String,
    checkpoint_id: String,
    damping: f64,
    solver: SolverKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    diverged: bool,
    entries: Vec<InfluenceEntry>,
}

impl InfluenceResult {
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let file = CacheFile {
            version: CACHE_VERSION,
            test_image_id: self.test_image_id.clone(),
            checkpoint_id: self.checkpoint_id.clone(),
            damping: self.damping,
            solver: self.solver,
            k: Some(self.k),
            diverged: self.diverged,
            entries: self.entries.clone(),
        };
        let mut out = serde_json::to_vec_pretty(&file).expect("influence result serializes");
        out.push(b'\n');
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self, String> {
        let file: CacheFile = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
        if file.version != CACHE_VERSION {
            return Err(format!("unsupported cache version {}", file.version));
        }
        Ok(InfluenceResult {
            k: file.k.unwrap_or(file.entries.len()),
            test_image_id: file.test_image_id,
            checkpoint_id: file.checkpoint_id,
            damping: file.damping,
            solver: file.solver,
            diverged: file.diverged,
            entries: file.entries,
        })
    }
}

enum PreparedSolver {
    Exact(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Cg,
}

/// Outcome of one damped inverse-Hessian solve.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub solution: Vec<f64>,
    /// `‖(H + δI)s − b‖ / ‖b‖` (0 when `b = 0`).
    pub relative_residual: f64,
    pub iterations: usize,
    pub diverged: bool,
}

/// Influence scorer for one checkpoint and training set. Preparation
/// (training gradients, and the Cholesky factor for the exact solver) is
/// shared by every test sample scored afterwards.
pub struct InfluenceEngine<'a> {
    backend: &'a dyn ModelBackend,
    params: &'a [f64],
    checkpoint_id: String,
    cfg: InfluenceSolverConfig,
    train_ids: Vec<String>,
    train: Vec<Sample<'a>>,
    train_grads: Vec<Vec<f64>>,
    solver: PreparedSolver,
}

impl<'a> InfluenceEngine<'a> {
    pub fn new(
        backend: &'a dyn ModelBackend,
        params: &'a [f64],
        checkpoint_id: &str,
        train: Vec<(String, Sample<'a>)>,
        cfg: InfluenceSolverConfig,
    ) -> Result<Self, InfluenceError> {
        cfg.validate()?;
        let desc = backend.descriptor();
        desc.require(Capability::Gradient)?;
        match cfg.solver {
            SolverKind::Exact => desc.require(Capability::ExactHessian)?,
            SolverKind::Cg => desc.require(Capability::Hvp)?,
        }
        desc.check_params(params)?;
        if train.is_empty() {
            return Err(InfluenceError::NoTrainingData);
        }
        let (train_ids, train): (Vec<String>, Vec<Sample>) = train.into_iter().unzip();
        let train_grads = train
            .iter()
            .map(|s| loss_and_gradient(backend, params, s.input, s.label).map(|(_, g)| g))
            .collect::<Result<Vec<_>, _>>()?;
        let solver = match cfg.solver {
            SolverKind::Exact => {
                let mut h = backend.dense_hessian(params, &train)?;
                for i in 0..h.nrows() {
                    h[(i, i)] += cfg.damping;
                }
                PreparedSolver::Exact(h.cholesky().ok_or(InfluenceError::SingularSystem)?)
            }
            SolverKind::Cg => PreparedSolver::Cg,
        };
        Ok(Self {
            backend,
            params,
            checkpoint_id: checkpoint_id.to_string(),
            cfg,
            train_ids,
            train,
            train_grads,
            solver,
        })
    }

    pub fn config(&self) -> &InfluenceSolverConfig {
        &self.cfg
    }

    /// `(H + δI) v`.
    pub fn damped_hvp(&self, v: &[f64]) -> Result<Vec<f64>, InfluenceError> {
        let mut hv = self.backend.hvp(self.params, &self.train, v)?;
        for (o, x) in hv.iter_mut().zip(v) {
            *o += self.cfg.damping * x;
        }
        Ok(hv)
    }

    /// Solves `(H + δI) s = rhs` with the configured solver.
    pub fn solve(&self, rhs: &[f64]) -> Result<SolveOutcome, InfluenceError> {
        let b_norm = norm(rhs);
        match &self.solver {
            PreparedSolver::Exact(chol) => {
                let s = chol.solve(&DVector::from_column_slice(rhs));
                Ok(SolveOutcome {
                    solution: s.as_slice().to_vec(),
                    relative_residual: 0.0,
                    iterations: 0,
                    diverged: false,
                })
            }
            PreparedSolver::Cg => {
                let n = rhs.len();
                let mut x = vec![0.0; n];
                if b_norm == 0.0 {
                    return Ok(SolveOutcome {
                        solution: x,
                        relative_residual: 0.0,
                        iterations: 0,
                        diverged: false,
                    });
                }
                let target = self.cfg.cg_tolerance * b_norm;
                let mut r = rhs.to_vec();
                let mut p = r.clone();
                let mut rr = dot(&r, &r);
                let mut iterations = 0;
                while iterations < self.cfg.cg_max_iters && rr.sqrt() > target {
                    let ap = self.damped_hvp(&p)?;
                    let pap = dot(&p, &ap);
                    if pap <= 0.0 {
                        break;
                    }
                    let alpha = rr / pap;
                    axpy(alpha, &p, &mut x);
                    axpy(-alpha, &ap, &mut r);
                    let rr_next = dot(&r, &r);
                    let beta = rr_next / rr;
                    for (pi, ri) in p.iter_mut().zip(&r) {
                        *pi = ri + beta * *pi;
                    }
                    rr = rr_next;
                    iterations += 1;
                }
                // Judge convergence on the true residual, not the recurrence.
                let ax = self.damped_hvp(&x)?;
                let residual: Vec<f64> = ax.iter().zip(rhs).map(|(a, b)| a - b).collect();
                let relative_residual = norm(&residual) / b_norm;
                Ok(SolveOutcome {
                    solution: x,
                    relative_residual,
                    iterations,
                    diverged: relative_residual > self.cfg.cg_tolerance,
                })
            }
        }
    }

    /// Scores of every training sample, in training-set order.
    pub fn all_scores(&self, test: Sample<'_>) -> Result<(Vec<f64>, SolveOutcome), InfluenceError> {
        let (_, test_grad) = loss_and_gradient(self.backend, self.params, test.input, test.label)?;
        let outcome = self.solve(&test_grad)?;
        let scores = self.train_grads.iter().map(|g| dot(&outcome.solution, g)).collect();
        Ok((scores, outcome))
    }

    /// Top-k training samples by descending score; ties broken by image id.
    pub fn influence_scores(&self, test_image_id: &str, test: Sample<'_>) -> Result<InfluenceResult, InfluenceError> {
        let (scores, outcome) = self.all_scores(test)?;
        let mut entries: Vec<InfluenceEntry> = self
            .train_ids
            .iter()
            .zip(scores)
            .map(|(id, score)| InfluenceEntry {
                train_image_id: id.clone(),
                score,
            })
            .collect();
        entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.train_image_id.cmp(&b.train_image_id))
        });
        entries.truncate(self.cfg.k);
        Ok(InfluenceResult {
            test_image_id: test_image_id.to_string(),
            checkpoint_id: self.checkpoint_id.clone(),
            damping: self.cfg.damping,
            solver: self.cfg.solver,
            k: self.cfg.k,
            diverged: outcome.diverged,
            entries,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense `(H + δI)` for diagnostics and tests.
pub fn damped_dense_hessian(
    backend: &dyn ModelBackend,
    params: &[f64],
    train: &[Sample<'_>],
    damping: f64,
) -> Result<DMatrix<f64>, InfluenceError> {
    let mut h = backend.dense_hessian(params, train)?;
    for i in 0..h.nrows() {
        h[(i, i)] += damping;
    }
    Ok(h)
}

/// Influence results on disk, one directory per checkpoint.
#[derive(Debug, Clone)]
pub struct InfluenceCache {
    root: PathBuf,
}

impl InfluenceCache {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, checkpoint_id: &str, test_image_id: &str) -> Option<PathBuf> {
        (is_valid_identifier(checkpoint_id) && is_safe_relative(test_image_id))
            .then(|| self.root.join(checkpoint_id).join(format!("{test_image_id}.json")))
    }

    pub fn save(&self, result: &InfluenceResult) -> Result<PathBuf, InfluenceError> {
        let path = self
            .path_for(&result.checkpoint_id, &result.test_image_id)
            .ok_or_else(|| InfluenceError::InvalidConfig("unsafe cache key".into()))?;
        write_atomic(&path, &result.to_cache_bytes()).map_err(|source| InfluenceError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    /// Cached result for `checkpoint_id`; results of other checkpoints are
    /// never returned.
    pub fn load(&self, checkpoint_id: &str, test_image_id: &str) -> Result<Option<InfluenceResult>, InfluenceError> {
        let Some(path) = self.path_for(checkpoint_id, test_image_id) else {
            return Ok(None);
        };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(InfluenceError::Io { path, source }),
        };
        let result = InfluenceResult::from_cache_bytes(&bytes).map_err(|reason| InfluenceError::CorruptCacheFile {
            path: path.clone(),
            reason,
        })?;
        if result.checkpoint_id != checkpoint_id || result.test_image_id != test_image_id {
            return Err(InfluenceError::CorruptCacheFile {
                path,
                reason: "header does not match its location".into(),
            });
        }
        Ok(Some(result))
    }

    pub fn exists(&self, checkpoint_id: &str, test_image_id: &str) -> bool {
        self.path_for(checkpoint_id, test_image_id).is_some_and(|p| p.is_file())
    }
}
