//! JSON Schemas (draft 2020-12) of every response body, keyed by name under
//! `$defs`. Clients and the contract tests validate against these.

use serde_json::{json, Value};

pub const SCHEMA_NAMES: [&str; 14] = [
    "ApiError",
    "Meta",
    "ImageListing",
    "ImageView",
    "SaliencyMap",
    "Influence",
    "Mask",
    "PutMask",
    "Submit",
    "TaskRecord",
    "TaskList",
    "CheckpointList",
    "Activate",
    "Html",
];

fn uint() -> Value {
    json!({"type": "integer", "minimum": 0})
}

/// The full schema document.
pub fn schema_document() -> Value {
    let str_t = json!({"type": "string"});
    let nullable_str = json!({"type": ["string", "null"]});
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$defs": {
            "ApiError": {
                "type": "object",
                "required": ["code", "message", "http_status"],
                "additionalProperties": false,
                "properties": {
                    "code": {"type": "string", "pattern": "^[A-Z][A-Z_]*$"},
                    "message": str_t,
                    "http_status": {"type": "integer", "minimum": 400, "maximum": 599}
                }
            },
            "Meta": {
                "type": "object",
                "required": ["class_names", "input_shape", "active_checkpoint_id", "backend", "segmentation_backends"],
                "additionalProperties": false,
                "properties": {
                    "class_names": {"type": "array", "items": str_t, "minItems": 1},
                    "input_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
                    "active_checkpoint_id": str_t,
                    "backend": str_t,
                    "segmentation_backends": {"type": "array", "items": str_t}
                }
            },
            "Prediction": {
                "type": "object",
                "required": ["image_id", "predicted_label", "probabilities", "correct", "checkpoint_id"],
                "additionalProperties": false,
                "properties": {
                    "image_id": str_t,
                    "predicted_label": uint(),
                    "probabilities": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 1},
                    "correct": {"type": "boolean"},
                    "checkpoint_id": str_t
                }
            },
            "ImageView": {
                "type": "object",
                "required": ["image_id", "split", "class_label", "relative_path", "width", "height", "channels",
                             "prediction", "has_mask", "has_influence"],
                "additionalProperties": false,
                "properties": {
                    "image_id": str_t,
                    "split": {"enum": ["train", "test"]},
                    "class_label": uint(),
                    "relative_path": str_t,
                    "width": uint(),
                    "height": uint(),
                    "channels": uint(),
                    "prediction": {"oneOf": [{"type": "null"}, {"$ref": "#/$defs/Prediction"}]},
                    "has_mask": {"type": "boolean"},
                    "has_influence": {"type": "boolean"}
                }
            },
            "ImageListing": {
                "type": "object",
                "required": ["items", "total", "page", "page_size", "stale", "predictions_checkpoint_id"],
                "additionalProperties": false,
                "properties": {
                    "items": {"type": "array", "items": {"$ref": "#/$defs/ImageView"}},
                    "total": uint(),
                    "page": uint(),
                    "page_size": {"type": "integer", "minimum": 1},
                    "stale": {"type": "boolean"},
                    "predictions_checkpoint_id": nullable_str
                }
            },
            "SaliencyMap": {
                "type": "object",
                "required": ["image_id", "class_index", "checkpoint_id", "width", "height", "values"],
                "additionalProperties": false,
                "properties": {
                    "image_id": str_t,
                    "class_index": uint(),
                    "checkpoint_id": str_t,
                    "width": uint(),
                    "height": uint(),
                    "values": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}}
                }
            },
            "Influence": {
                "type": "object",
                "required": ["test_image_id", "checkpoint_id", "damping", "solver", "k", "diverged", "entries"],
                "additionalProperties": false,
                "properties": {
                    "test_image_id": str_t,
                    "checkpoint_id": str_t,
                    "damping": {"type": "number", "minimum": 0},
                    "solver": {"enum": ["exact", "cg"]},
                    "k": uint(),
                    "diverged": {"type": "boolean"},
                    "entries": {"type": "array", "items": {
                        "type": "object",
                        "required": ["train_image_id", "score"],
                        "additionalProperties": false,
                        "properties": {"train_image_id": str_t, "score": {"type": "number"}}
                    }}
                }
            },
            "Mask": {
                "type": "object",
                "required": ["image_id", "width", "height", "ones", "png_base64"],
                "additionalProperties": false,
                "properties": {
                    "image_id": str_t,
                    "width": uint(),
                    "height": uint(),
                    "revision": {"type": "integer", "minimum": 1},
                    "ones": uint(),
                    "png_base64": {"type": "string", "pattern": "^[A-Za-z0-9+/]+=*$"}
                }
            },
            "PutMask": {
                "type": "object",
                "required": ["image_id", "revision"],
                "additionalProperties": false,
                "properties": {"image_id": str_t, "revision": {"type": "integer", "minimum": 1}}
            },
            "Status": {"enum": ["queued", "running", "done", "failed", "cancelled"]},
            "Submit": {
                "type": "object",
                "required": ["job_id", "status"],
                "additionalProperties": false,
                "properties": {"job_id": str_t, "status": {"$ref": "#/$defs/Status"}}
            },
            "TaskRecord": {
                "type": "object",
                "required": ["job_id", "kind", "status", "progress", "message", "submitted_at",
                             "started_at", "finished_at", "payload", "result_ref"],
                "additionalProperties": false,
                "properties": {
                    "job_id": str_t,
                    "kind": {"enum": ["train", "influence", "predict"]},
                    "status": {"$ref": "#/$defs/Status"},
                    "progress": {"type": "number", "minimum": 0, "maximum": 1},
                    "message": str_t,
                    "submitted_at": str_t,
                    "started_at": nullable_str,
                    "finished_at": nullable_str,
                    "payload": true,
                    "result_ref": nullable_str
                }
            },
            "TaskList": {
                "type": "object",
                "required": ["tasks"],
                "additionalProperties": false,
                "properties": {"tasks": {"type": "array", "items": {"$ref": "#/$defs/TaskRecord"}}}
            },
            "CheckpointList": {
                "type": "object",
                "required": ["active_checkpoint_id", "checkpoints"],
                "additionalProperties": false,
                "properties": {
                    "active_checkpoint_id": str_t,
                    "checkpoints": {"type": "array", "items": {
                        "type": "object",
                        "required": ["checkpoint_id", "backend_name", "num_classes", "created_at", "tag", "active"],
                        "additionalProperties": false,
                        "properties": {
                            "checkpoint_id": str_t,
                            "backend_name": str_t,
                            "num_classes": uint(),
                            "created_at": str_t,
                            "parent_job_id": str_t,
                            "tag": str_t,
                            "active": {"type": "boolean"}
                        }
                    }}
                }
            },
            "Activate": {
                "type": "object",
                "required": ["active_checkpoint_id"],
                "additionalProperties": false,
                "properties": {"active_checkpoint_id": str_t}
            },
            "Html": {"type": "string"}
        }
    })
}

/// A standalone schema for one named definition.
pub fn schema_for(name: &str) -> Option<Value> {
    let mut doc = schema_document();
    doc["$defs"].get(name)?;
    doc["$ref"] = Value::String(format!("#/$defs/{name}"));
    Some(doc)
}

/// Schema a response must satisfy, given the request method and path
/// (without query). `None` marks binary image responses.
pub fn response_schema(method: &str, path: &str, status: u16, content_type: &str) -> Option<&'static str> {
    if status >= 400 {
        return Some("ApiError");
    }
    if content_type.starts_with("image/") {
        return None;
    }
    if !path.starts_with("/api") {
        return Some("Html");
    }
    let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
    Some(match (method, segs.as_slice()) {
        ("GET", ["api", "meta"]) => "Meta",
        ("GET", ["api", "images"]) => "ImageListing",
        ("GET", ["api", "image", .., "saliency"]) => "SaliencyMap",
        ("GET", ["api", "image", .., "influence"]) => "Influence",
        ("GET", ["api", "image", .., "mask"]) => "Mask",
        ("GET", ["api", "image", ..]) => "ImageView",
        ("PUT", ["api", "image", .., "mask"]) => "PutMask",
        ("POST", ["api", "image", .., "mask", "propose"]) => "Mask",
        ("POST", ["api", "tasks"]) => "Submit",
        ("GET", ["api", "tasks"]) => "TaskList",
        ("GET", ["api", "tasks", _]) | ("POST", ["api", "tasks", _, "cancel"]) => "TaskRecord",
        ("GET", ["api", "checkpoints"]) => "CheckpointList",
        ("POST", ["api", "checkpoints", _, "activate"]) => "Activate",
        _ => "ApiError",
    })
}
