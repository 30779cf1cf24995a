use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use despur_core::annotation::MaskError;
use despur_core::dataset::DatasetError;
use despur_core::influence::InfluenceError;
use despur_core::model::ModelError;
use despur_core::paired::PairedError;
use despur_core::saliency::SaliencyError;
use despur_core::tasks::TaskError;
use despur_core::WorkbenchError;

/// Error envelope returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub http_status: u16,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
            http_status: status.as_u16(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message)
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

fn model_code(e: &ModelError) -> (StatusCode, &'static str) {
    use ModelError::*;
    match e {
        UnknownCheckpoint(_) => (StatusCode::NOT_FOUND, "UNKNOWN_CHECKPOINT"),
        InvalidLabel { .. } => (StatusCode::BAD_REQUEST, "INVALID_LABEL"),
        ShapeMismatch { .. } | ParameterCount { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "SHAPE_MISMATCH"),
        CapabilityMissing { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "CAPABILITY_MISSING"),
        NonFiniteGradient => (StatusCode::INTERNAL_SERVER_ERROR, "NON_FINITE_GRADIENT"),
        UnknownBackend(_) | BackendMismatch { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "BACKEND_MISMATCH"),
        UnreadableCheckpoint { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "UNREADABLE_CHECKPOINT"),
        Plugin(_) => (StatusCode::INTERNAL_SERVER_ERROR, "MODEL_PLUGIN_FAILED"),
        Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR"),
    }
}

fn dataset_code(e: &DatasetError) -> (StatusCode, &'static str) {
    use DatasetError::*;
    match e {
        UnknownImageId(_) => (StatusCode::NOT_FOUND, "UNKNOWN_IMAGE"),
        PredictionsUnavailable => (StatusCode::CONFLICT, "PREDICTIONS_UNAVAILABLE"),
        MissingSplit(_) | UnknownClassDirectory(_) | UndecodableImage { .. } | DimensionMismatch { .. } => {
            (StatusCode::INTERNAL_SERVER_ERROR, "DATASET_INVALID")
        }
        CorruptPredictionCache { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "CORRUPT_CACHE_FILE"),
        Model(m) => model_code(m),
        Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR"),
    }
}

fn mask_code(e: &MaskError) -> (StatusCode, &'static str) {
    use MaskError::*;
    match e {
        UnknownImageId(_) => (StatusCode::NOT_FOUND, "UNKNOWN_IMAGE"),
        DimensionMismatch { .. } => (StatusCode::BAD_REQUEST, "DIMENSION_MISMATCH"),
        NonBinaryMask => (StatusCode::BAD_REQUEST, "NON_BINARY_MASK"),
        TestSplitReadOnly(_) => (StatusCode::CONFLICT, "TEST_SPLIT_READONLY"),
        CorruptMaskFile { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "CORRUPT_MASK_FILE"),
        InvalidRange { .. } => (StatusCode::BAD_REQUEST, "INVALID_RANGE"),
        UnknownBackend(_) => (StatusCode::BAD_REQUEST, "UNKNOWN_BACKEND"),
        BackendFailure { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "SEGMENTATION_FAILED"),
        UndecodableMask(_) => (StatusCode::BAD_REQUEST, "UNDECODABLE_MASK"),
        Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR"),
    }
}

fn code_of(e: &WorkbenchError) -> (StatusCode, &'static str) {
    match e {
        WorkbenchError::Config(_) => (StatusCode::INTERNAL_SERVER_ERROR, "CONFIG_INVALID"),
        WorkbenchError::Dataset(d) => dataset_code(d),
        WorkbenchError::Mask(m) => mask_code(m),
        WorkbenchError::Model(m) => model_code(m),
        WorkbenchError::Influence(i) => match i {
            InfluenceError::Model(m) => model_code(m),
            InfluenceError::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "INVALID_CONFIG"),
            InfluenceError::NoTrainingData => (StatusCode::CONFLICT, "NO_TRAINING_DATA"),
            InfluenceError::SingularSystem => (StatusCode::INTERNAL_SERVER_ERROR, "SINGULAR_SYSTEM"),
            InfluenceError::CorruptCacheFile { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "CORRUPT_CACHE_FILE"),
            InfluenceError::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR"),
        },
        WorkbenchError::Saliency(s) => match s {
            SaliencyError::Model(m) => model_code(m),
            SaliencyError::InvalidClass { .. } => (StatusCode::BAD_REQUEST, "INVALID_CLASS"),
            SaliencyError::InvalidAlpha(_) => (StatusCode::BAD_REQUEST, "INVALID_ALPHA"),
            SaliencyError::DimensionMismatch { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "DIMENSION_MISMATCH"),
        },
        WorkbenchError::Paired(p) => match p {
            PairedError::Model(m) => model_code(m),
            PairedError::InvalidConfig { .. } => (StatusCode::BAD_REQUEST, "INVALID_CONFIG"),
            PairedError::NoTrainingData => (StatusCode::CONFLICT, "NO_TRAINING_DATA"),
            PairedError::DimensionMismatch { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "DIMENSION_MISMATCH"),
            PairedError::NonFiniteLoss { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "NON_FINITE_LOSS"),
        },
        WorkbenchError::Task(t) => match t {
            TaskError::UnknownJobId(_) => (StatusCode::NOT_FOUND, "UNKNOWN_JOB"),
            TaskError::InvalidPayload(_) => (StatusCode::BAD_REQUEST, "INVALID_PAYLOAD"),
            TaskError::QueueFull => (StatusCode::SERVICE_UNAVAILABLE, "QUEUE_FULL"),
            TaskError::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR"),
        },
        WorkbenchError::NotTestImage(_) => (StatusCode::BAD_REQUEST, "NOT_TEST_IMAGE"),
        WorkbenchError::InvalidRequest(_) => (StatusCode::BAD_REQUEST, "BAD_REQUEST"),
        WorkbenchError::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR"),
    }
}

impl From<WorkbenchError> for ApiError {
    fn from(e: WorkbenchError) -> Self {
        let (status, code) = code_of(&e);
        if status.is_server_error() {
            tracing::error!("{code}: {e}");
        }
        ApiError::new(status, code, e.to_string())
    }
}

macro_rules! via_workbench {
    ($($t:ty),*) => {$(
        impl From<$t> for ApiError {
            fn from(e: $t) -> Self {
                WorkbenchError::from(e).into()
            }
        }
    )*};
}

via_workbench!(
    DatasetError,
    MaskError,
    ModelError,
    InfluenceError,
    SaliencyError,
    TaskError
);
