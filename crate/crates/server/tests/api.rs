use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use despur_core::annotation::PixelMask;
use despur_core::synthetic::{spurious_patch, SpuriousPatchSpec};
use despur_core::workbench::ZERO_CHECKPOINT_ID;
use despur_core::{Workbench, WorkbenchPaths};
use despur_server::contract::{schema_for, SCHEMA_NAMES};
use despur_server::{router, ServerOptions};

struct Fixture {
    _dir: tempfile::TempDir,
    wb: Arc<Workbench>,
    app: Router,
    train_id: String,
    test_id: String,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let paths = WorkbenchPaths::under(dir.path());
    let spec = SpuriousPatchSpec {
        size: 10,
        n_train: 8,
        n_test: 4,
        patch: 2,
        ..Default::default()
    };
    let config = spurious_patch(&spec).install(&paths).unwrap();
    let wb = Workbench::open(paths, config, None).unwrap();
    let app = router(wb.clone(), &ServerOptions::default());
    Fixture {
        train_id: "train/left/0000.png".into(),
        test_id: "test/left/0000.png".into(),
        _dir: dir,
        wb,
        app,
    }
}

struct Reply {
    status: StatusCode,
    content_type: String,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes)
            .unwrap_or_else(|e| panic!("non-JSON body ({e}): {}", String::from_utf8_lossy(&self.bytes)))
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        content_type,
        bytes,
    }
}

struct Schemas(HashMap<&'static str, jsonschema::Validator>);

impl Schemas {
    fn new() -> Self {
        Schemas(
            SCHEMA_NAMES
                .iter()
                .map(|n| (*n, jsonschema::validator_for(&schema_for(n).unwrap()).unwrap()))
                .collect(),
        )
    }

    fn check(&self, name: &str, v: &Value) -> Result<(), String> {
        let validator = &self.0[name];
        if validator.is_valid(v) {
            return Ok(());
        }
        let errors: Vec<String> = validator.iter_errors(v).map(|e| e.to_string()).collect();
        Err(format!("{name} schema violated: {errors:?}\nbody: {v}"))
    }
}

fn put_body(mask: &PixelMask) -> Value {
    json!({ "png_base64": base64::engine::general_purpose::STANDARD.encode(mask.to_png()) })
}

#[tokio::test]
async fn meta_reflects_config_and_is_idempotent() {
    let f = fixture();
    let a = call(&f.app, Method::GET, "/api/meta", None).await;
    assert_eq!(a.status, StatusCode::OK);
    let body = a.json();
    Schemas::new().check("Meta", &body).unwrap();
    assert_eq!(body["class_names"].as_array().unwrap().len(), 2);
    assert_eq!(body["input_shape"], json!([1, 10, 10]));
    assert_eq!(body["active_checkpoint_id"], ZERO_CHECKPOINT_ID);
    let b = call(&f.app, Method::GET, "/api/meta", None).await;
    assert_eq!(a.bytes, b.bytes);
}

#[tokio::test]
async fn listing_pages_and_filters() {
    let f = fixture();
    let s = Schemas::new();
    let r = call(&f.app, Method::GET, "/api/images?split=train&page=1&page_size=3", None).await;
    assert_eq!(r.status, StatusCode::OK);
    let body = r.json();
    s.check("ImageListing", &body).unwrap();
    assert_eq!(body["total"], 8);
    assert_eq!(body["items"].as_array().unwrap().len(), 3);

    let r = call(&f.app, Method::GET, "/api/images?split=test&filter=misclassified", None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["code"], "PREDICTIONS_UNAVAILABLE");

    f.wb.refresh_predictions(None).unwrap();
    let r = call(&f.app, Method::GET, "/api/images?split=test&filter=misclassified", None).await;
    let body = r.json();
    s.check("ImageListing", &body).unwrap();
    // the zero model predicts class 0 everywhere
    assert_eq!(body["total"], 2);

    for bad in [
        "/api/images?split=val",
        "/api/images?page_size=0",
        "/api/images?filter=x",
        "/api/images?page=-1",
    ] {
        let r = call(&f.app, Method::GET, bad, None).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{bad}");
        s.check("ApiError", &r.json()).unwrap();
    }
}

#[tokio::test]
async fn image_bytes_and_info() {
    let f = fixture();
    let r = call(&f.app, Method::GET, &format!("/api/image/{}/raw", f.train_id), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type, "image/png");
    assert_eq!(&r.bytes[1..4], b"PNG");
    let encoded = f.train_id.replace('/', "%2F");
    let r = call(&f.app, Method::GET, &format!("/api/image/{encoded}"), None).await;
    assert_eq!(r.status, StatusCode::OK);
    Schemas::new().check("ImageView", &r.json()).unwrap();
    let r = call(&f.app, Method::GET, "/api/image/train/left/9999.png", None).await;
    assert_eq!(
        (r.status, r.json()["code"].clone()),
        (StatusCode::NOT_FOUND, json!("UNKNOWN_IMAGE"))
    );
}

#[tokio::test]
async fn mask_round_trip_and_test_split_rule() {
    let f = fixture();
    let mut mask = PixelMask::zeros(f.train_id.clone(), 10, 10);
    for i in [0, 11, 22, 99] {
        mask.bits[i] = 1;
    }
    let uri = format!("/api/image/{}/mask", f.train_id);
    let r = call(&f.app, Method::GET, &uri, None).await;
    assert_eq!(r.json()["code"], "NO_MASK");
    let r = call(&f.app, Method::PUT, &uri, Some(put_body(&mask))).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["revision"], 1);
    let r = call(&f.app, Method::PUT, &uri, Some(put_body(&mask))).await;
    assert_eq!(r.json()["revision"], 2);

    let r = call(&f.app, Method::GET, &uri, None).await;
    let body = r.json();
    Schemas::new().check("Mask", &body).unwrap();
    let png = base64::engine::general_purpose::STANDARD
        .decode(body["png_base64"].as_str().unwrap())
        .unwrap();
    assert_eq!(PixelMask::from_png(f.train_id.clone(), &png).unwrap(), mask);

    let test_mask = PixelMask::zeros(f.test_id.clone(), 10, 10);
    let r = call(
        &f.app,
        Method::PUT,
        &format!("/api/image/{}/mask", f.test_id),
        Some(put_body(&test_mask)),
    )
    .await;
    assert_eq!(
        (r.status, r.json()["code"].clone()),
        (StatusCode::CONFLICT, json!("TEST_SPLIT_READONLY"))
    );

    let wrong = PixelMask::zeros(f.train_id.clone(), 5, 10);
    let r = call(&f.app, Method::PUT, &uri, Some(put_body(&wrong))).await;
    assert_eq!(r.json()["code"], "DIMENSION_MISMATCH");
    let r = call(&f.app, Method::PUT, &uri, Some(json!({"png_base64": "!!"}))).await;
    assert_eq!(r.json()["code"], "UNDECODABLE_MASK");
}

#[tokio::test]
async fn proposals() {
    let f = fixture();
    let uri = format!("/api/image/{}/mask/propose", f.train_id);
    let r = call(
        &f.app,
        Method::POST,
        &uri,
        Some(json!({"method": "range", "params": {"lo": 0.9, "hi": 0.1}})),
    )
    .await;
    assert_eq!(
        (r.status, r.json()["code"].clone()),
        (StatusCode::BAD_REQUEST, json!("INVALID_RANGE"))
    );
    let r = call(
        &f.app,
        Method::POST,
        &uri,
        Some(json!({"method": "range", "params": {"lo": 0.0, "hi": 1.0}})),
    )
    .await;
    let body = r.json();
    Schemas::new().check("Mask", &body).unwrap();
    assert_eq!(body["ones"], 100);
    let r = call(&f.app, Method::POST, &uri, Some(json!({"method": "border-flood"}))).await;
    assert_eq!(r.status, StatusCode::OK);
    let r = call(&f.app, Method::POST, &uri, Some(json!({"method": "nope"}))).await;
    assert_eq!(r.json()["code"], "UNKNOWN_BACKEND");
    assert!(!f.wb.masks().has_mask(&f.train_id));
}

#[tokio::test]
async fn saliency_and_influence() {
    let f = fixture();
    let s = Schemas::new();
    let r = call(
        &f.app,
        Method::GET,
        &format!("/api/image/{}/saliency?class=1", f.train_id),
        None,
    )
    .await;
    let body = r.json();
    s.check("SaliencyMap", &body).unwrap();
    assert_eq!(body["class_index"], 1);
    let r = call(
        &f.app,
        Method::GET,
        &format!("/api/image/{}/saliency?format=png", f.train_id),
        None,
    )
    .await;
    assert_eq!((r.status, r.content_type.as_str()), (StatusCode::OK, "image/png"));
    let r = call(
        &f.app,
        Method::GET,
        &format!("/api/image/{}/saliency?class=7", f.train_id),
        None,
    )
    .await;
    assert_eq!(r.json()["code"], "INVALID_CLASS");

    let r = call(
        &f.app,
        Method::GET,
        &format!("/api/image/{}/influence", f.train_id),
        None,
    )
    .await;
    assert_eq!(
        (r.status, r.json()["code"].clone()),
        (StatusCode::BAD_REQUEST, json!("NOT_TEST_IMAGE"))
    );
    let uri = format!("/api/image/{}/influence", f.test_id);
    let r = call(&f.app, Method::GET, &uri, None).await;
    assert_eq!(r.json()["code"], "INFLUENCE_NOT_COMPUTED");
    let r = call(&f.app, Method::GET, &format!("{uri}?compute=true"), None).await;
    let computed = r.json();
    s.check("Influence", &computed).unwrap();
    assert_eq!(computed["entries"].as_array().unwrap().len(), 8);
    let r = call(&f.app, Method::GET, &uri, None).await;
    assert_eq!(r.json(), computed);
}

async fn poll(app: &Router, job: &str) -> Value {
    for _ in 0..600 {
        let rec = call(app, Method::GET, &format!("/api/tasks/{job}"), None).await.json();
        if ["done", "failed", "cancelled"].contains(&rec["status"].as_str().unwrap()) {
            return rec;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("job {job} did not finish");
}

#[tokio::test]
async fn train_activate_predict_lifecycle() {
    let f = fixture();
    let s = Schemas::new();
    let payload = json!({"base_checkpoint_id": ZERO_CHECKPOINT_ID, "epochs": 3, "batch_size": 4,
                         "learning_rate": 0.5, "lambda": 1.0, "seed": 1});
    let r = call(
        &f.app,
        Method::POST,
        "/api/tasks",
        Some(json!({"kind": "train", "payload": payload})),
    )
    .await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let body = r.json();
    s.check("Submit", &body).unwrap();
    let rec = poll(&f.app, body["job_id"].as_str().unwrap()).await;
    s.check("TaskRecord", &rec).unwrap();
    assert_eq!(rec["status"], "done", "{rec}");
    let ckpt = rec["result_ref"].as_str().unwrap().to_string();

    let list = call(&f.app, Method::GET, "/api/checkpoints", None).await.json();
    s.check("CheckpointList", &list).unwrap();
    assert!(list["checkpoints"]
        .as_array()
        .unwrap()
        .iter()
        .any(|c| c["checkpoint_id"] == ckpt.as_str()));

    f.wb.refresh_predictions(None).unwrap();
    let r = call(&f.app, Method::POST, &format!("/api/checkpoints/{ckpt}/activate"), None).await;
    s.check("Activate", &r.json()).unwrap();
    assert_eq!(
        call(&f.app, Method::GET, "/api/meta", None).await.json()["active_checkpoint_id"],
        ckpt.as_str()
    );
    assert_eq!(
        call(&f.app, Method::GET, "/api/images", None).await.json()["stale"],
        true
    );

    let r = call(&f.app, Method::POST, "/api/tasks", Some(json!({"kind": "predict"}))).await;
    poll(&f.app, r.json()["job_id"].as_str().unwrap()).await;
    assert_eq!(
        call(&f.app, Method::GET, "/api/images", None).await.json()["stale"],
        false
    );

    let r = call(&f.app, Method::POST, "/api/checkpoints/missing/activate", None).await;
    assert_eq!(
        (r.status, r.json()["code"].clone()),
        (StatusCode::NOT_FOUND, json!("UNKNOWN_CHECKPOINT"))
    );

    let tasks = call(&f.app, Method::GET, "/api/tasks?status=done", None).await.json();
    s.check("TaskList", &tasks).unwrap();
    assert_eq!(tasks["tasks"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn submit_rejections_and_cancel() {
    let f = fixture();
    let bad = json!({"kind": "train", "payload": {"base_checkpoint_id": ZERO_CHECKPOINT_ID, "epochs": 1,
                     "batch_size": 4, "learning_rate": 0.0}});
    let r = call(&f.app, Method::POST, "/api/tasks", Some(bad)).await;
    assert_eq!(
        (r.status, r.json()["code"].clone()),
        (StatusCode::BAD_REQUEST, json!("INVALID_PAYLOAD"))
    );
    let r = call(&f.app, Method::POST, "/api/tasks", Some(json!({"kind": "sleep"}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    let long = json!({"kind": "train", "payload": {"base_checkpoint_id": ZERO_CHECKPOINT_ID, "epochs": 100000,
                      "batch_size": 1, "learning_rate": 0.1}});
    let job = call(&f.app, Method::POST, "/api/tasks", Some(long)).await.json()["job_id"]
        .as_str()
        .unwrap()
        .to_string();
    let r = call(&f.app, Method::POST, &format!("/api/tasks/{job}/cancel"), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(poll(&f.app, &job).await["status"], "cancelled");
    let r = call(&f.app, Method::GET, "/api/tasks/job-999999", None).await;
    assert_eq!(r.json()["code"], "UNKNOWN_JOB");
}

#[tokio::test]
async fn unknown_routes_and_methods_use_the_envelope() {
    let f = fixture();
    let s = Schemas::new();
    for (m, uri, code) in [
        (Method::GET, "/api/nothing", "NOT_FOUND"),
        (Method::DELETE, "/api/meta", "METHOD_NOT_ALLOWED"),
        (Method::PUT, "/api/image/train/left/0000.png", "METHOD_NOT_ALLOWED"),
        (Method::POST, "/api/images", "METHOD_NOT_ALLOWED"),
    ] {
        let r = call(&f.app, m, uri, Some(json!({}))).await;
        let body = r.json();
        s.check("ApiError", &body).unwrap();
        assert_eq!(body["code"], code, "{uri}");
        assert_eq!(body["http_status"], r.status.as_u16());
    }
    let r = call(&f.app, Method::GET, "/", None).await;
    assert!(r.content_type.starts_with("text/html"));
}
