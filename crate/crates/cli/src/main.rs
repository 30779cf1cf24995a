//! `despur`: serve the annotation workbench or run its batch jobs headless.
//!
//! Exit codes: 0 success, 2 configuration or user error, 1 internal error.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use despur_core::config::{AppConfig, ConfigError};
use despur_core::dataset::DatasetError;
use despur_core::influence::{InfluenceError, InfluenceSolverConfig, SolverKind};
use despur_core::model::ModelError;
use despur_core::paired::{PairedError, TrainingJobConfig};
use despur_core::tasks::{TaskKind, TaskStatus};
use despur_core::workbench::{InfluenceScope, Uncontrolled};
use despur_core::{Workbench, WorkbenchError, WorkbenchPaths};
use despur_server::{router, ServerOptions};

#[derive(Parser, Debug)]
#[command(name = "despur", version, about = "Spurious-feature annotation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Serve the HTTP API and UI.
    Serve(ServeArgs),
    /// Compute and cache influence scores for test images.
    PrecomputeInfluence(PrecomputeArgs),
    /// Run one paired-training job.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
struct PathArgs {
    /// Image tree with train/ and test/ splits.
    #[arg(long, env = "DESPUR_DATA_ROOT")]
    data_root: PathBuf,
    #[arg(long, env = "DESPUR_MASK_ROOT")]
    mask_root: PathBuf,
    /// Influence cache (precomputed, or an empty folder).
    #[arg(long, env = "DESPUR_INFLUENCE_ROOT")]
    influence_root: PathBuf,
    #[arg(long, env = "DESPUR_CKPT_ROOT")]
    ckpt_root: PathBuf,
    /// Predictions, task log and job metrics.
    #[arg(long, env = "DESPUR_CACHE_ROOT")]
    cache_root: PathBuf,
    /// JSON configuration file.
    #[arg(long, env = "DESPUR_CONFIG")]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[command(flatten)]
    paths: PathArgs,
    #[arg(long, env = "DESPUR_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "DESPUR_BIND", default_value = "127.0.0.1")]
    bind: std::net::IpAddr,
    /// Checkpoint to activate; all-zero parameters when omitted.
    #[arg(long, env = "DESPUR_CHECKPOINT")]
    checkpoint: Option<String>,
    /// Built UI assets served at `/`.
    #[arg(long, env = "DESPUR_UI_DIR")]
    ui_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PrecomputeArgs {
    #[command(flatten)]
    paths: PathArgs,
    #[arg(long, env = "DESPUR_CHECKPOINT")]
    checkpoint: Option<String>,
    #[arg(long, default_value = "misclassified_only")]
    scope: InfluenceScope,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0.01)]
    damping: f64,
    #[arg(long, default_value = "exact")]
    solver: SolverKind,
    #[arg(long, default_value_t = 100)]
    cg_max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    cg_tolerance: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    paths: PathArgs,
    /// Training job configuration (JSON).
    #[arg(long)]
    job_config: PathBuf,
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
    user_error: bool,
}

impl Failure {
    fn user(kind: &'static str, message: impl Into<String>) -> Self {
        Failure {
            kind,
            message: message.into(),
            user_error: true,
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Failure {
            kind: "Internal",
            message: message.into(),
            user_error: false,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::user("ConfigInvalid", e.to_string())
    }
}

impl From<WorkbenchError> for Failure {
    fn from(e: WorkbenchError) -> Self {
        let msg = e.to_string();
        match e {
            WorkbenchError::Config(c) => c.into(),
            WorkbenchError::Dataset(DatasetError::Io { .. }) => Failure::internal(msg),
            WorkbenchError::Dataset(DatasetError::Model(ModelError::UnknownCheckpoint(_)))
            | WorkbenchError::Model(ModelError::UnknownCheckpoint(_)) => Failure::user("UnknownCheckpoint", msg),
            WorkbenchError::Model(ModelError::UnknownBackend(_) | ModelError::BackendMismatch { .. }) => {
                Failure::user("ConfigInvalid", msg)
            }
            WorkbenchError::Dataset(
                DatasetError::MissingSplit(_)
                | DatasetError::UnknownClassDirectory(_)
                | DatasetError::UndecodableImage { .. }
                | DatasetError::DimensionMismatch { .. },
            ) => Failure::user("DatasetInvalid", msg),
            WorkbenchError::Influence(InfluenceError::InvalidConfig(_))
            | WorkbenchError::Paired(PairedError::InvalidConfig { .. }) => Failure::user("ConfigInvalid", msg),
            WorkbenchError::NotTestImage(_) | WorkbenchError::InvalidRequest(_) => {
                Failure::user("InvalidArgument", msg)
            }
            _ => Failure::internal(msg),
        }
    }
}

fn open(paths: &PathArgs, checkpoint: Option<&str>) -> Result<Arc<Workbench>, Failure> {
    let config = AppConfig::from_file(&paths.config)?;
    if !paths.data_root.is_dir() {
        return Err(Failure::user(
            "DatasetInvalid",
            format!("data root {} is not a directory", paths.data_root.display()),
        ));
    }
    let wb_paths = WorkbenchPaths {
        data_root: paths.data_root.clone(),
        mask_root: paths.mask_root.clone(),
        influence_root: paths.influence_root.clone(),
        ckpt_root: paths.ckpt_root.clone(),
        cache_root: paths.cache_root.clone(),
    };
    Ok(Workbench::open(wb_paths, config, checkpoint)?)
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let wb = open(&args.paths, args.checkpoint.as_deref())?;
    if wb.predictions_for(&wb.active_checkpoint_id())?.is_none() {
        let n = wb.refresh_predictions(None)?;
        tracing::info!("scored {n} images with {}", wb.active_checkpoint_id());
    }
    let options = ServerOptions { ui_dir: args.ui_dir };
    let addr = SocketAddr::new(args.bind, args.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::internal(e.to_string()))?;
    let served = wb.clone();
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => Failure::user("PortInUse", format!("{addr} is already in use")),
            _ => Failure::user("InvalidArgument", format!("cannot bind {addr}: {e}")),
        })?;
        let local = listener.local_addr().map_err(|e| Failure::internal(e.to_string()))?;
        println!("despur serving on http://{local}/");
        let app = router(served, &options);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Failure::internal(e.to_string()))
    })?;
    wb.tasks().shutdown();
    Ok(())
}

fn precompute(args: PrecomputeArgs) -> Result<(), Failure> {
    let cfg = InfluenceSolverConfig {
        damping: args.damping,
        solver: args.solver,
        cg_max_iters: args.cg_max_iters,
        cg_tolerance: args.cg_tolerance,
        k: args.k,
    };
    cfg.validate()
        .map_err(|e| Failure::user("ConfigInvalid", e.to_string()))?;
    let wb = open(&args.paths, args.checkpoint.as_deref())?;
    let ids = wb.influence_scope(args.scope)?;
    let out = wb.precompute_influence(&ids, cfg, &Uncontrolled)?;
    println!(
        "precomputed influence for {} test images (checkpoint {})",
        out.processed,
        wb.active_checkpoint_id()
    );
    Ok(())
}

fn read_job_config(path: &Path) -> Result<TrainingJobConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::user("ConfigInvalid", format!("cannot read {}: {e}", path.display())))?;
    let cfg: TrainingJobConfig =
        serde_json::from_str(&text).map_err(|e| Failure::user("ConfigInvalid", format!("{}: {e}", path.display())))?;
    cfg.validate()
        .map_err(|e| Failure::user("ConfigInvalid", e.to_string()))?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = read_job_config(&args.job_config)?;
    let wb = open(&args.paths, None)?;
    if !wb.checkpoints().exists(&cfg.base_checkpoint_id) {
        return Err(Failure::user(
            "UnknownCheckpoint",
            format!("unknown checkpoint `{}`", cfg.base_checkpoint_id),
        ));
    }
    let payload = serde_json::to_value(&cfg).map_err(|e| Failure::internal(e.to_string()))?;
    let job = wb
        .tasks()
        .submit(TaskKind::Train, payload)
        .map_err(|e| Failure::user("ConfigInvalid", e.to_string()))?;
    let rec = loop {
        let rec = wb
            .tasks()
            .wait(&job, Duration::from_secs(3600))
            .map_err(|e| Failure::internal(e.to_string()))?;
        if rec.status.is_terminal() {
            break rec;
        }
    };
    match rec.status {
        TaskStatus::Done => {
            println!(
                "{job} done: checkpoint {} ({}); metrics in {}",
                rec.result_ref.as_deref().unwrap_or("-"),
                rec.message,
                wb.paths().metrics_path(&job).display()
            );
            Ok(())
        }
        _ => Err(Failure::internal(format!("{job} {:?}: {}", rec.status, rec.message))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("DESPUR_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::PrecomputeInfluence(a) => precompute(a),
        Command::Train(a) => train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.kind, f.message);
            ExitCode::from(if f.user_error { 2 } else { 1 })
        }
    }
}
