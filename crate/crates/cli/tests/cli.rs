use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use despur_core::synthetic::{spurious_patch, SpuriousPatchSpec};
use despur_core::WorkbenchPaths;

struct Env {
    dir: tempfile::TempDir,
    paths: WorkbenchPaths,
    config: PathBuf,
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let paths = WorkbenchPaths::under(dir.path());
    let spec = SpuriousPatchSpec {
        size: 10,
        n_train: 8,
        n_test: 4,
        patch: 2,
        ..Default::default()
    };
    let d = spurious_patch(&spec);
    d.install(&paths).unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, d.config_json().to_string()).unwrap();
    Env { dir, paths, config }
}

fn despur(env: &Env, sub: &str) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_despur"));
    c.arg(sub)
        .arg("--data-root")
        .arg(&env.paths.data_root)
        .arg("--mask-root")
        .arg(&env.paths.mask_root)
        .arg("--influence-root")
        .arg(&env.paths.influence_root)
        .arg("--ckpt-root")
        .arg(&env.paths.ckpt_root)
        .arg("--cache-root")
        .arg(&env.paths.cache_root)
        .arg("--config")
        .arg(&env.config)
        .env("DESPUR_LOG", "warn");
    c
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_job(dir: &Path, name: &str, body: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body.to_string()).unwrap();
    p
}

fn http_get(port: u16, path: &str) -> String {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

#[test]
fn serve_answers_meta() {
    let e = env();
    let mut child = despur(&e, "serve")
        .args(["--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let url = line.trim().rsplit(' ').next().unwrap().to_string();
    let port: u16 = url.trim_end_matches('/').rsplit(':').next().unwrap().parse().unwrap();
    let resp = http_get(port, "/api/meta");
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"active_checkpoint_id\":\"zero-init\""), "{resp}");
}

#[test]
fn serve_reports_port_in_use() {
    let e = env();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = despur(&e, "serve").args(["--port", &port]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("PortInUse"), "{}", stderr(&out));
}

#[test]
fn missing_class_names_is_a_config_error() {
    let e = env();
    std::fs::write(&e.config, r#"{"input_shape": [1, 10, 10], "backend_name": "logreg"}"#).unwrap();
    let out = despur(&e, "serve").args(["--port", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("class_names") && err.contains("ConfigInvalid"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn unknown_checkpoint_is_a_user_error() {
    let e = env();
    let out = despur(&e, "serve")
        .args(["--port", "0", "--checkpoint", "unknown-id"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("UnknownCheckpoint"), "{}", stderr(&out));
}

#[test]
fn missing_split_is_a_dataset_error() {
    let e = env();
    std::fs::remove_dir_all(e.paths.data_root.join("test")).unwrap();
    let out = despur(&e, "precompute-influence").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("DatasetInvalid"), "{}", stderr(&out));
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let e = env();
    let job = write_job(
        e.dir.path(),
        "job.json",
        serde_json::json!({"base_checkpoint_id": "zero-init", "epochs": 4, "batch_size": 4,
                           "learning_rate": 0.5, "lambda": 1.0, "seed": 9}),
    );
    let out = despur(&e, "train").arg("--job-config").arg(&job).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("checkpoint ckpt-job-000001") && stdout.contains("test_acc"),
        "{stdout}"
    );
    let metrics = std::fs::read_to_string(e.paths.metrics_path("job-000001")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(e.paths.ckpt_root.join("ckpt-job-000001.rbck").exists());

    // a second run continues the job numbering
    let out = despur(&e, "train").arg("--job-config").arg(&job).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("ckpt-job-000002"));
}

#[test]
fn train_rejects_bad_job_configs() {
    let e = env();
    let zero_lr = write_job(
        e.dir.path(),
        "lr.json",
        serde_json::json!({"base_checkpoint_id": "zero-init", "epochs": 1, "batch_size": 4, "learning_rate": 0.0}),
    );
    let out = despur(&e, "train").arg("--job-config").arg(&zero_lr).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("ConfigInvalid") && stderr(&out).contains("learning_rate"),
        "{}",
        stderr(&out)
    );

    let ghost = write_job(
        e.dir.path(),
        "ghost.json",
        serde_json::json!({"base_checkpoint_id": "ghost", "epochs": 1, "batch_size": 4, "learning_rate": 0.1}),
    );
    let out = despur(&e, "train").arg("--job-config").arg(&ghost).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("UnknownCheckpoint"), "{}", stderr(&out));
}

#[test]
fn precompute_influence_fills_the_cache() {
    let e = env();
    let out = despur(&e, "precompute-influence")
        .args(["--scope", "all_test", "--k", "3", "--solver", "cg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("for 4 test images"));
    let files = walk(&e.paths.influence_root);
    assert_eq!(files.len(), 4, "{files:?}");

    let out = despur(&e, "precompute-influence")
        .args(["--damping", "-1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = despur(&e, "precompute-influence")
        .args(["--scope", "everything"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn environment_variables_stand_in_for_flags() {
    let e = env();
    let out = Command::new(env!("CARGO_BIN_EXE_despur"))
        .args(["precompute-influence", "--scope", "all_test"])
        .env("DESPUR_DATA_ROOT", &e.paths.data_root)
        .env("DESPUR_MASK_ROOT", &e.paths.mask_root)
        .env("DESPUR_INFLUENCE_ROOT", &e.paths.influence_root)
        .env("DESPUR_CKPT_ROOT", &e.paths.ckpt_root)
        .env("DESPUR_CACHE_ROOT", &e.paths.cache_root)
        .env("DESPUR_CONFIG", &e.config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
