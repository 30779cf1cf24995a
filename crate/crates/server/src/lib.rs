//! HTTP JSON API over a [`Workbench`]. All routes live under `/api/`; the
//! browser UI is served from `/`.
//!
//! Image ids contain slashes (`train/cat/0001.png`), so image routes take the
//! id as a tail segment: `/api/image/train/cat/0001.png/mask`. Percent-encoded
//! ids work as well.

pub mod contract;
mod error;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use despur_core::annotation::PixelMask;
use despur_core::dataset::{ListFilter, Split};
use despur_core::influence::{InfluenceEntry, InfluenceResult, SolverKind};
use despur_core::tasks::{TaskKind, TaskRecord, TaskStatus};
use despur_core::workbench::Meta;
use despur_core::Workbench;

pub use error::ApiError;

pub const MAX_PAGE_SIZE: usize = 1000;
const BODY_LIMIT: usize = 32 * 1024 * 1024;

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Directory with the built UI; a placeholder page is served without it.
    pub ui_dir: Option<PathBuf>,
}

type AppState = State<Arc<Workbench>>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(wb: Arc<Workbench>, options: &ServerOptions) -> Router {
    let mut app = Router::new()
        .route("/api/meta", get(meta))
        .route("/api/images", get(list_images))
        .route("/api/image/{*rest}", get(image_get).put(image_put).post(image_post))
        .route("/api/tasks", get(list_tasks).post(submit_task))
        .route("/api/tasks/{id}", get(task_status))
        .route("/api/tasks/{id}/cancel", post(cancel_task))
        .route("/api/checkpoints", get(list_checkpoints))
        .route("/api/checkpoints/{id}/activate", post(activate))
        .route("/api", axum::routing::any(api_not_found))
        .route("/api/{*rest}", axum::routing::any(api_not_found));
    app = match &options.ui_dir {
        Some(dir) => app.fallback_service(
            tower_http::services::ServeDir::new(dir)
                .fallback(tower_http::services::ServeFile::new(dir.join("index.html"))),
        ),
        None => app.route("/", get(placeholder_ui)),
    };
    app.method_not_allowed_fallback(method_not_allowed)
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(wb)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("request handler failed: {e}")))?
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(t)| t).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn body<T>(b: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    b.map(|Json(t)| t).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn api_not_found() -> ApiError {
    ApiError::not_found("NOT_FOUND", "no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        "METHOD_NOT_ALLOWED",
        "method not allowed",
    )
}

async fn placeholder_ui() -> Html<&'static str> {
    Html(concat!(
        "<!doctype html><html><head><meta charset=\"utf-8\"><title>despur</title></head>",
        "<body><h1>despur</h1><p>The API is served under <code>/api/</code>; ",
        "start with <a href=\"/api/meta\">/api/meta</a>.</p></body></html>"
    ))
}

// ---- meta & listing ----

#[derive(Debug, Serialize)]
pub struct MetaResponse {
    #[serde(flatten)]
    pub meta: Meta,
    pub segmentation_backends: Vec<String>,
}

async fn meta(State(wb): AppState) -> Json<MetaResponse> {
    Json(MetaResponse {
        meta: wb.meta(),
        segmentation_backends: wb.segmentation_backends(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListQuery {
    #[serde(default)]
    pub split: Option<String>,
    #[serde(default)]
    pub page: Option<usize>,
    #[serde(default)]
    pub page_size: Option<usize>,
    #[serde(default)]
    pub filter: Option<String>,
}

async fn list_images(State(wb): AppState, q: Result<Query<ListQuery>, QueryRejection>) -> ApiResult<Response> {
    let q = query(q)?;
    let split: Split = q
        .split
        .as_deref()
        .unwrap_or("train")
        .parse()
        .map_err(ApiError::bad_request)?;
    let filter: ListFilter = q
        .filter
        .as_deref()
        .unwrap_or("all")
        .parse()
        .map_err(ApiError::bad_request)?;
    let page_size = q.page_size.unwrap_or(50);
    if page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!(
            "page_size must be in 1..={MAX_PAGE_SIZE}"
        )));
    }
    let page = q.page.unwrap_or(0);
    let listing = blocking(move || Ok(wb.list_images(split, page, page_size, filter)?)).await?;
    Ok(Json(listing).into_response())
}

// ---- per-image routes ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ImageRoute {
    Info,
    Raw,
    Saliency,
    Influence,
    Mask,
    Propose,
}

fn split_image_route(rest: &str) -> (&str, ImageRoute) {
    const SUFFIXES: [(&str, ImageRoute); 5] = [
        ("/mask/propose", ImageRoute::Propose),
        ("/saliency", ImageRoute::Saliency),
        ("/influence", ImageRoute::Influence),
        ("/mask", ImageRoute::Mask),
        ("/raw", ImageRoute::Raw),
    ];
    let rest = rest.trim_start_matches('/');
    for (suffix, route) in SUFFIXES {
        if let Some(id) = rest.strip_suffix(suffix) {
            if !id.is_empty() {
                return (id, route);
            }
        }
    }
    (rest, ImageRoute::Info)
}

fn image_path(p: Result<Path<String>, axum::extract::rejection::PathRejection>) -> ApiResult<(String, ImageRoute)> {
    let Path(rest) = p.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let (id, route) = split_image_route(&rest);
    Ok((id.to_string(), route))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageQuery {
    #[serde(default)]
    pub class: Option<usize>,
    #[serde(default)]
    pub format: Option<String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub compute: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct InfluenceResponse {
    pub test_image_id: String,
    pub checkpoint_id: String,
    pub damping: f64,
    pub solver: SolverKind,
    pub k: usize,
    pub diverged: bool,
    pub entries: Vec<InfluenceEntry>,
}

impl From<InfluenceResult> for InfluenceResponse {
    fn from(r: InfluenceResult) -> Self {
        Self {
            test_image_id: r.test_image_id,
            checkpoint_id: r.checkpoint_id,
            damping: r.damping,
            solver: r.solver,
            k: r.k,
            diverged: r.diverged,
            entries: r.entries,
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MaskResponse {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    /// Present for stored masks, absent for proposals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<u64>,
    pub ones: usize,
    pub png_base64: String,
}

impl MaskResponse {
    fn new(mask: &PixelMask, revision: Option<u64>) -> Self {
        Self {
            image_id: mask.image_id.clone(),
            width: mask.width,
            height: mask.height,
            revision,
            ones: mask.count_ones(),
            png_base64: B64.encode(mask.to_png()),
        }
    }
}

fn png_response(bytes: Vec<u8>, content_type: &'static str) -> Response {
    ([(header::CONTENT_TYPE, content_type)], bytes).into_response()
}

async fn image_get(
    State(wb): AppState,
    p: Result<Path<String>, axum::extract::rejection::PathRejection>,
    q: Result<Query<ImageQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let (id, route) = image_path(p)?;
    let q = query(q)?;
    blocking(move || {
        Ok(match route {
            ImageRoute::Info => Json(wb.image(&id)?).into_response(),
            ImageRoute::Raw => {
                let (bytes, ct) = wb.image_bytes(&id)?;
                png_response(bytes, ct)
            }
            ImageRoute::Saliency => match q.format.as_deref().unwrap_or("json") {
                "json" => Json(wb.saliency(&id, q.class)?).into_response(),
                "png" => png_response(wb.saliency_overlay(&id, q.class, q.alpha.unwrap_or(0.5))?, "image/png"),
                other => return Err(ApiError::bad_request(format!("unknown format `{other}` (json or png)"))),
            },
            ImageRoute::Influence => match wb.influence(&id, q.compute.unwrap_or(false))? {
                Some(r) => Json(InfluenceResponse::from(r)).into_response(),
                None => {
                    return Err(ApiError::not_found(
                        "INFLUENCE_NOT_COMPUTED",
                        format!("no influence cached for `{id}` under the active checkpoint"),
                    ))
                }
            },
            ImageRoute::Mask => match wb.load_mask(&id)? {
                Some(m) => Json(MaskResponse::new(&m, Some(wb.masks().revision(&id)))).into_response(),
                None => {
                    wb.dataset().record(&id)?;
                    return Err(ApiError::not_found("NO_MASK", format!("`{id}` has no saved mask")));
                }
            },
            ImageRoute::Propose => return Err(method_not_allowed_now()),
        })
    })
    .await
}

fn method_not_allowed_now() -> ApiError {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        "METHOD_NOT_ALLOWED",
        "method not allowed",
    )
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PutMaskRequest {
    pub png_base64: String,
}

#[derive(Debug, Deserialize, Serialize, PartialEq)]
pub struct PutMaskResponse {
    pub image_id: String,
    pub revision: u64,
}

async fn image_put(
    State(wb): AppState,
    p: Result<Path<String>, axum::extract::rejection::PathRejection>,
    b: Result<Json<PutMaskRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let (id, route) = image_path(p)?;
    if route != ImageRoute::Mask {
        return Err(method_not_allowed_now());
    }
    let req = body(b)?;
    blocking(move || {
        let bytes = B64
            .decode(req.png_base64.trim())
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "UNDECODABLE_MASK", format!("base64: {e}")))?;
        let mask = PixelMask::from_png(id.clone(), &bytes)?;
        let revision = wb.save_mask(&mask)?;
        Ok(Json(PutMaskResponse { image_id: id, revision }).into_response())
    })
    .await
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProposeRequest {
    pub method: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

async fn image_post(
    State(wb): AppState,
    p: Result<Path<String>, axum::extract::rejection::PathRejection>,
    b: Result<Json<ProposeRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let (id, route) = image_path(p)?;
    if route != ImageRoute::Propose {
        return Err(method_not_allowed_now());
    }
    let req = body(b)?;
    blocking(move || {
        let mask = wb.propose_mask(&id, &req.method, &req.params)?;
        Ok(Json(MaskResponse::new(&mask, None)).into_response())
    })
    .await
}

// ---- tasks ----

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub kind: TaskKind,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Deserialize, Serialize, PartialEq)]
pub struct SubmitResponse {
    pub job_id: String,
    pub status: TaskStatus,
}

async fn submit_task(State(wb): AppState, b: Result<Json<SubmitRequest>, JsonRejection>) -> ApiResult<Response> {
    let req = body(b)?;
    blocking(move || {
        let job_id = wb.tasks().submit(req.kind, req.payload)?;
        let status = wb.tasks().get_status(&job_id)?.status;
        Ok((StatusCode::ACCEPTED, Json(SubmitResponse { job_id, status })).into_response())
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskListQuery {
    #[serde(default)]
    pub status: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskList {
    pub tasks: Vec<TaskRecord>,
}

async fn list_tasks(State(wb): AppState, q: Result<Query<TaskListQuery>, QueryRejection>) -> ApiResult<Json<TaskList>> {
    let q = query(q)?;
    let status = q
        .status
        .as_deref()
        .map(str::parse::<TaskStatus>)
        .transpose()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(TaskList {
        tasks: wb.tasks().list_tasks(status),
    }))
}

async fn task_status(State(wb): AppState, Path(id): Path<String>) -> ApiResult<Json<TaskRecord>> {
    Ok(Json(wb.tasks().get_status(&id)?))
}

async fn cancel_task(State(wb): AppState, Path(id): Path<String>) -> ApiResult<Json<TaskRecord>> {
    Ok(Json(wb.tasks().cancel(&id)?))
}

// ---- checkpoints ----

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointSummary {
    pub checkpoint_id: String,
    pub backend_name: String,
    pub num_classes: usize,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_job_id: Option<String>,
    pub tag: String,
    pub active: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointList {
    pub active_checkpoint_id: String,
    pub checkpoints: Vec<CheckpointSummary>,
}

async fn list_checkpoints(State(wb): AppState) -> ApiResult<Json<CheckpointList>> {
    blocking(move || {
        let active = wb.active_checkpoint_id();
        let checkpoints = wb
            .list_checkpoints()?
            .into_iter()
            .map(|c| CheckpointSummary {
                active: c.checkpoint_id == active,
                checkpoint_id: c.checkpoint_id,
                backend_name: c.backend_name,
                num_classes: c.num_classes,
                created_at: c.metadata.created_at.to_rfc3339(),
                parent_job_id: c.metadata.parent_job_id,
                tag: c.metadata.tag,
            })
            .collect();
        Ok(Json(CheckpointList {
            active_checkpoint_id: active,
            checkpoints,
        }))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ActivateResponse {
    pub active_checkpoint_id: String,
}

async fn activate(State(wb): AppState, Path(id): Path<String>) -> ApiResult<Json<ActivateResponse>> {
    blocking(move || {
        let ckpt = wb.activate(&id)?;
        Ok(Json(ActivateResponse {
            active_checkpoint_id: ckpt.checkpoint_id.clone(),
        }))
    })
    .await
}
