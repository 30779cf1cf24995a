//! Single-worker FIFO job queue with cooperative cancellation.
//!
//! Status moves only along `queued → running → {done, failed, cancelled}`
//! and `queued → cancelled`. Every transition is appended to a JSON-lines log
//! (`<cache_root>/tasks.jsonl`); on reopen the last line per job wins and
//! jobs that were still queued or running become `failed` with message
//! `interrupted`.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const QUEUE_BOUND: usize = 100;
pub const TASK_LOG_FILE: &str = "tasks.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Train,
    Influence,
    Predict,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(TaskKind::Train),
            "influence" => Ok(TaskKind::Influence),
            "predict" => Ok(TaskKind::Predict),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Done | TaskStatus::Failed | TaskStatus::Cancelled)
    }

    /// Edges of the lifecycle graph.
    pub fn can_transition_to(self, next: TaskStatus) -> bool {
        use TaskStatus::*;
        matches!(
            (self, next),
            (Queued, Running) | (Queued, Cancelled) | (Running, Done) | (Running, Failed) | (Running, Cancelled)
        )
    }
}

impl std::str::FromStr for TaskStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "queued" => Ok(TaskStatus::Queued),
            "running" => Ok(TaskStatus::Running),
            "done" => Ok(TaskStatus::Done),
            "failed" => Ok(TaskStatus::Failed),
            "cancelled" => Ok(TaskStatus::Cancelled),
            other => Err(format!("unknown task status `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub job_id: String,
    pub kind: TaskKind,
    pub status: TaskStatus,
    pub progress: f64,
    pub message: String,
    pub submitted_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub payload: Value,
    pub result_ref: Option<String>,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown job id `{0}`")]
    UnknownJobId(String),
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("queue is full ({QUEUE_BOUND} jobs waiting)")]
    QueueFull,
    #[error("task log {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// What a finished executor run reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub result_ref: Option<String>,
    pub message: String,
    /// The run stopped early because cancellation was requested.
    pub cancelled: bool,
}

/// Performs jobs. `run` is called on the worker thread, one job at a time.
pub trait TaskExecutor: Send + Sync {
    fn validate(&self, kind: TaskKind, payload: &Value) -> Result<(), String>;
    fn run(&self, job: &TaskRecord, ctx: &TaskContext) -> Result<RunOutcome, String>;
}

struct State {
    records: Vec<TaskRecord>,
    index: HashMap<String, usize>,
    queue: VecDeque<usize>,
    running: Option<usize>,
    cancel_requested: bool,
    next_id: u64,
    shutdown: bool,
    log: Option<(PathBuf, File)>,
}

impl State {
    fn append_log(&mut self, idx: usize) {
        let line = serde_json::to_string(&self.records[idx]).expect("task record serializes");
        if let Some((path, file)) = &mut self.log {
            if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                tracing::error!("cannot append to task log {}: {e}", path.display());
            }
        }
    }

    fn transition(&mut self, idx: usize, next: TaskStatus) {
        let rec = &mut self.records[idx];
        assert!(
            rec.status.can_transition_to(next),
            "illegal task transition {:?} -> {:?}",
            rec.status,
            next
        );
        rec.status = next;
        match next {
            TaskStatus::Running => rec.started_at = Some(Utc::now()),
            TaskStatus::Done => {
                rec.progress = 1.0;
                rec.finished_at = Some(Utc::now());
            }
            _ => rec.finished_at = Some(Utc::now()),
        }
        self.append_log(idx);
    }
}

struct Shared {
    state: Mutex<State>,
    work: Condvar,
    changed: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Handle given to a running executor.
pub struct TaskContext {
    shared: Arc<Shared>,
    idx: usize,
    job_id: String,
}

impl TaskContext {
    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    /// Raises progress to `fraction` (clamped to `[0, 1]`); never lowers it.
    pub fn set_progress(&self, fraction: f64) {
        let mut st = self.shared.lock();
        let rec = &mut st.records[self.idx];
        if rec.status == TaskStatus::Running && fraction.is_finite() {
            rec.progress = rec.progress.max(fraction.clamp(0.0, 1.0));
        }
        drop(st);
        self.shared.changed.notify_all();
    }

    pub fn set_message(&self, message: impl Into<String>) {
        self.shared.lock().records[self.idx].message = message.into();
    }

    pub fn is_cancelled(&self) -> bool {
        let st = self.shared.lock();
        st.running == Some(self.idx) && (st.cancel_requested || st.shutdown)
    }
}

pub struct TaskCenter {
    shared: Arc<Shared>,
    worker: Mutex<Option<JoinHandle<()>>>,
    executor: Mutex<Option<Weak<dyn TaskExecutor>>>,
}

impl std::fmt::Debug for TaskCenter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskCenter").finish_non_exhaustive()
    }
}

fn parse_job_number(job_id: &str) -> Option<u64> {
    job_id.strip_prefix("job-")?.parse().ok()
}

fn read_log(path: &Path) -> Result<Vec<TaskRecord>, TaskError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(TaskError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let mut order: Vec<String> = Vec::new();
    let mut latest: HashMap<String, TaskRecord> = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| TaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TaskRecord>(&line) {
            Ok(rec) => {
                if !latest.contains_key(&rec.job_id) {
                    order.push(rec.job_id.clone());
                }
                latest.insert(rec.job_id.clone(), rec);
            }
            Err(e) => tracing::warn!("{}:{}: skipping unreadable task line: {e}", path.display(), n + 1),
        }
    }
    Ok(order.into_iter().filter_map(|id| latest.remove(&id)).collect())
}

impl TaskCenter {
    /// In-memory queue with no log.
    pub fn in_memory() -> Self {
        Self::with_state(Vec::new(), None)
    }

    /// Opens (or creates) the log under `cache_root`, marking jobs left
    /// unfinished by a previous process as failed.
    pub fn open(cache_root: &Path) -> Result<Self, TaskError> {
        let path = cache_root.join(TASK_LOG_FILE);
        let io = |source| TaskError::Io {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(cache_root).map_err(io)?;
        let mut records = read_log(&path)?;
        let now = Utc::now();
        for rec in &mut records {
            if !rec.status.is_terminal() {
                rec.status = TaskStatus::Failed;
                rec.message = "interrupted".into();
                rec.finished_at = Some(now);
            }
        }
        let mut compacted = String::new();
        for rec in &records {
            compacted.push_str(&serde_json::to_string(rec).expect("task record serializes"));
            compacted.push('\n');
        }
        crate::fsutil::write_atomic(&path, compacted.as_bytes()).map_err(io)?;
        let file = OpenOptions::new().append(true).open(&path).map_err(io)?;
        Ok(Self::with_state(records, Some((path, file))))
    }

    fn with_state(records: Vec<TaskRecord>, log: Option<(PathBuf, File)>) -> Self {
        let next_id = records
            .iter()
            .filter_map(|r| parse_job_number(&r.job_id))
            .max()
            .unwrap_or(0)
            + 1;
        let index = records.iter().enumerate().map(|(i, r)| (r.job_id.clone(), i)).collect();
        TaskCenter {
            shared: Arc::new(Shared {
                state: Mutex::new(State {
                    records,
                    index,
                    queue: VecDeque::new(),
                    running: None,
                    cancel_requested: false,
                    next_id,
                    shutdown: false,
                    log,
                }),
                work: Condvar::new(),
                changed: Condvar::new(),
            }),
            worker: Mutex::new(None),
            executor: Mutex::new(None),
        }
    }

    /// Starts the worker thread. The center keeps only a weak reference, so
    /// the executor may own the center.
    pub fn start<E: TaskExecutor + 'static>(&self, executor: &Arc<E>) {
        let mut worker = self.worker.lock().unwrap();
        if worker.is_some() {
            return;
        }
        let weak: Weak<dyn TaskExecutor> = Arc::downgrade(executor) as Weak<dyn TaskExecutor>;
        *self.executor.lock().unwrap() = Some(weak.clone());
        let shared = self.shared.clone();
        *worker = Some(
            std::thread::Builder::new()
                .name("task-worker".into())
                .spawn(move || worker_loop(shared, weak))
                .expect("spawn task worker"),
        );
    }

    pub fn submit(&self, kind: TaskKind, payload: Value) -> Result<String, TaskError> {
        let executor = self.executor.lock().unwrap().as_ref().and_then(Weak::upgrade);
        if let Some(exec) = executor {
            exec.validate(kind, &payload).map_err(TaskError::InvalidPayload)?;
        }
        let mut st = self.shared.lock();
        if st.queue.len() >= QUEUE_BOUND {
            return Err(TaskError::QueueFull);
        }
        let job_id = format!("job-{:06}", st.next_id);
        st.next_id += 1;
        let idx = st.records.len();
        st.records.push(TaskRecord {
            job_id: job_id.clone(),
            kind,
            status: TaskStatus::Queued,
            progress: 0.0,
            message: String::new(),
            submitted_at: Utc::now(),
            started_at: None,
            finished_at: None,
            payload,
            result_ref: None,
        });
        st.index.insert(job_id.clone(), idx);
        st.queue.push_back(idx);
        st.append_log(idx);
        drop(st);
        self.shared.work.notify_all();
        self.shared.changed.notify_all();
        Ok(job_id)
    }

    pub fn get_status(&self, job_id: &str) -> Result<TaskRecord, TaskError> {
        let st = self.shared.lock();
        st.index
            .get(job_id)
            .map(|&i| st.records[i].clone())
            .ok_or_else(|| TaskError::UnknownJobId(job_id.to_string()))
    }

    /// Newest first, optionally restricted to one status.
    pub fn list_tasks(&self, status: Option<TaskStatus>) -> Vec<TaskRecord> {
        let st = self.shared.lock();
        st.records
            .iter()
            .rev()
            .filter(|r| status.is_none_or(|s| r.status == s))
            .cloned()
            .collect()
    }

    /// Queued jobs are cancelled at once; a running job is asked to stop at
    /// its next safe boundary; terminal jobs are left alone.
    pub fn cancel(&self, job_id: &str) -> Result<TaskRecord, TaskError> {
        let mut st = self.shared.lock();
        let idx = *st
            .index
            .get(job_id)
            .ok_or_else(|| TaskError::UnknownJobId(job_id.to_string()))?;
        match st.records[idx].status {
            TaskStatus::Queued => {
                st.queue.retain(|&i| i != idx);
                st.records[idx].message = "cancelled before start".into();
                st.transition(idx, TaskStatus::Cancelled);
            }
            TaskStatus::Running => st.cancel_requested = true,
            _ => {}
        }
        let rec = st.records[idx].clone();
        drop(st);
        self.shared.changed.notify_all();
        Ok(rec)
    }

    /// Blocks until the job is terminal or `timeout` elapses; returns the
    /// latest snapshot either way.
    pub fn wait(&self, job_id: &str, timeout: Duration) -> Result<TaskRecord, TaskError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.lock();
        let idx = *st
            .index
            .get(job_id)
            .ok_or_else(|| TaskError::UnknownJobId(job_id.to_string()))?;
        loop {
            let now = Instant::now();
            if st.records[idx].status.is_terminal() || now >= deadline {
                return Ok(st.records[idx].clone());
            }
            st = self
                .shared
                .changed
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Stops the worker after its current job.
    pub fn shutdown(&self) {
        self.shared.lock().shutdown = true;
        self.shared.work.notify_all();
        if let Some(handle) = self.worker.lock().unwrap().take() {
            if handle.thread().id() != std::thread::current().id() {
                let _ = handle.join();
            }
        }
    }
}

impl Drop for TaskCenter {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker_loop(shared: Arc<Shared>, executor: Weak<dyn TaskExecutor>) {
    loop {
        let (idx, snapshot) = {
            let mut st = shared.lock();
            loop {
                if st.shutdown {
                    return;
                }
                if let Some(idx) = st.queue.pop_front() {
                    st.running = Some(idx);
                    st.cancel_requested = false;
                    st.transition(idx, TaskStatus::Running);
                    break (idx, st.records[idx].clone());
                }
                st = shared.work.wait(st).unwrap_or_else(|p| p.into_inner());
            }
        };
        shared.changed.notify_all();
        let ctx = TaskContext {
            shared: shared.clone(),
            idx,
            job_id: snapshot.job_id.clone(),
        };
        let result = match executor.upgrade() {
            Some(exec) => catch_unwind(AssertUnwindSafe(|| exec.run(&snapshot, &ctx)))
                .unwrap_or_else(|_| Err("executor panicked".into())),
            None => Err("executor is gone".into()),
        };
        let mut st = shared.lock();
        let next = match result {
            Ok(outcome) => {
                let rec = &mut st.records[idx];
                rec.result_ref = outcome.result_ref;
                rec.message = outcome.message;
                if outcome.cancelled {
                    TaskStatus::Cancelled
                } else {
                    TaskStatus::Done
                }
            }
            Err(message) => {
                st.records[idx].message = message;
                TaskStatus::Failed
            }
        };
        st.transition(idx, next);
        st.running = None;
        st.cancel_requested = false;
        drop(st);
        shared.changed.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicBool, Ordering};

    /// Runs until released (or cancelled), in small polling steps.
    #[derive(Default)]
    struct Gate {
        open: AtomicBool,
    }

    impl TaskExecutor for Gate {
        fn validate(&self, _: TaskKind, payload: &Value) -> Result<(), String> {
            match payload.get("learning_rate").and_then(Value::as_f64) {
                Some(lr) if lr <= 0.0 => Err("learning_rate must be > 0".into()),
                _ => Ok(()),
            }
        }

        fn run(&self, job: &TaskRecord, ctx: &TaskContext) -> Result<RunOutcome, String> {
            if job.payload.get("fail").is_some() {
                return Err("boom".into());
            }
            let mut step: f64 = 0.0;
            while !self.open.load(Ordering::SeqCst) {
                if ctx.is_cancelled() {
                    return Ok(RunOutcome {
                        cancelled: true,
                        ..Default::default()
                    });
                }
                step += 0.01;
                ctx.set_progress(step.min(0.9));
                std::thread::sleep(Duration::from_millis(1));
            }
            Ok(RunOutcome {
                result_ref: Some(format!("ckpt-{}", job.job_id)),
                ..Default::default()
            })
        }
    }

    fn center() -> (TaskCenter, Arc<Gate>) {
        let c = TaskCenter::in_memory();
        let gate = Arc::new(Gate::default());
        c.start(&gate);
        (c, gate)
    }

    fn wait_for(c: &TaskCenter, id: &str, status: TaskStatus) {
        let deadline = Instant::now() + Duration::from_secs(5);
        while c.get_status(id).unwrap().status != status {
            assert!(Instant::now() < deadline, "{id} never reached {status:?}");
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    #[test]
    fn fifo_single_worker_and_done_normalises_progress() {
        let (c, gate) = center();
        let a = c.submit(TaskKind::Train, Value::Null).unwrap();
        let b = c.submit(TaskKind::Predict, Value::Null).unwrap();
        assert_eq!(a, "job-000001");
        wait_for(&c, &a, TaskStatus::Running);
        assert_eq!(c.get_status(&b).unwrap().status, TaskStatus::Queued);
        assert!(c.list_tasks(Some(TaskStatus::Running)).len() <= 1);
        gate.open.store(true, Ordering::SeqCst);
        let done = c.wait(&b, Duration::from_secs(5)).unwrap();
        assert_eq!(done.status, TaskStatus::Done);
        assert_eq!(done.progress, 1.0);
        assert_eq!(c.get_status(&a).unwrap().result_ref.as_deref(), Some("ckpt-job-000001"));
        let listed: Vec<String> = c.list_tasks(None).into_iter().map(|r| r.job_id).collect();
        assert_eq!(listed, vec![b, a]);
    }

    #[test]
    fn invalid_payload_and_unknown_ids() {
        let (c, _gate) = center();
        assert!(matches!(
            c.submit(TaskKind::Train, serde_json::json!({"learning_rate": -1.0})),
            Err(TaskError::InvalidPayload(_))
        ));
        assert!(c.list_tasks(None).is_empty());
        assert!(matches!(c.get_status("job-9"), Err(TaskError::UnknownJobId(_))));
        assert!(matches!(c.cancel("nope"), Err(TaskError::UnknownJobId(_))));
    }

    #[test]
    fn cancel_queued_running_and_done() {
        let (c, gate) = center();
        let a = c.submit(TaskKind::Train, Value::Null).unwrap();
        let b = c.submit(TaskKind::Train, Value::Null).unwrap();
        wait_for(&c, &a, TaskStatus::Running);
        assert_eq!(c.cancel(&b).unwrap().status, TaskStatus::Cancelled);
        c.cancel(&a).unwrap();
        let rec = c.wait(&a, Duration::from_secs(5)).unwrap();
        assert_eq!(rec.status, TaskStatus::Cancelled);
        assert!(rec.started_at.is_some() && rec.finished_at.is_some());
        assert!(c.get_status(&b).unwrap().started_at.is_none());

        gate.open.store(true, Ordering::SeqCst);
        let d = c.submit(TaskKind::Train, Value::Null).unwrap();
        assert_eq!(c.wait(&d, Duration::from_secs(5)).unwrap().status, TaskStatus::Done);
        assert_eq!(c.cancel(&d).unwrap().status, TaskStatus::Done);
    }

    #[test]
    fn failures_are_reported() {
        let (c, _gate) = center();
        let a = c
            .submit(TaskKind::Influence, serde_json::json!({"fail": true}))
            .unwrap();
        let rec = c.wait(&a, Duration::from_secs(5)).unwrap();
        assert_eq!(rec.status, TaskStatus::Failed);
        assert_eq!(rec.message, "boom");
    }

    #[test]
    fn queue_bound() {
        let c = TaskCenter::in_memory(); // no worker: everything stays queued
        for _ in 0..QUEUE_BOUND {
            c.submit(TaskKind::Predict, Value::Null).unwrap();
        }
        assert!(matches!(
            c.submit(TaskKind::Predict, Value::Null),
            Err(TaskError::QueueFull)
        ));
        c.cancel("job-000001").unwrap();
        c.submit(TaskKind::Predict, Value::Null).unwrap();
    }

    #[test]
    fn log_survives_restart_and_interrupts_unfinished_jobs() {
        let dir = tempfile::tempdir().unwrap();
        {
            let c = TaskCenter::open(dir.path()).unwrap();
            c.submit(TaskKind::Train, Value::Null).unwrap();
            c.submit(TaskKind::Predict, serde_json::json!({"x": 1})).unwrap();
        }
        // a crash while job 1 was running
        let mut running: TaskRecord = serde_json::from_str(
            fs::read_to_string(dir.path().join(TASK_LOG_FILE))
                .unwrap()
                .lines()
                .next()
                .unwrap(),
        )
        .unwrap();
        running.status = TaskStatus::Running;
        running.started_at = Some(Utc::now());
        let mut log = OpenOptions::new()
            .append(true)
            .open(dir.path().join(TASK_LOG_FILE))
            .unwrap();
        writeln!(log, "{}", serde_json::to_string(&running).unwrap()).unwrap();
        writeln!(log, "{{torn").unwrap();

        let c = TaskCenter::open(dir.path()).unwrap();
        let all = c.list_tasks(None);
        assert_eq!(all.len(), 2);
        for rec in &all {
            assert_eq!(rec.status, TaskStatus::Failed);
            assert_eq!(rec.message, "interrupted");
        }
        assert_eq!(all[0].payload, serde_json::json!({"x": 1}));
        assert_eq!(c.submit(TaskKind::Train, Value::Null).unwrap(), "job-000003");
    }

    #[test]
    fn transition_graph() {
        use TaskStatus::*;
        let all = [Queued, Running, Done, Failed, Cancelled];
        let edges: usize = all
            .iter()
            .flat_map(|a| all.iter().map(move |b| a.can_transition_to(*b) as usize))
            .sum();
        assert_eq!(edges, 5);
        assert!(all
            .iter()
            .filter(|s| s.is_terminal())
            .all(|s| all.iter().all(|t| !s.can_transition_to(*t))));
    }
}
