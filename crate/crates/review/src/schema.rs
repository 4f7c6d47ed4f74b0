//! JSON Schemas for the API payloads, served at `/api/schema`.

use serde_json::{json, Value};

fn nullable(t: &str) -> Value {
    json!({ "type": [t, "null"] })
}

const STATUSES: [&str; 5] = ["pending", "confirmed", "rejected", "diagnostic", "auto_flagged"];

fn status_counts() -> Value {
    let props: serde_json::Map<String, Value> = STATUSES
        .iter()
        .map(|s| (s.to_string(), json!({ "type": "integer", "minimum": 0 })))
        .collect();
    json!({ "type": "object", "required": STATUSES, "properties": props })
}

fn instance_summary() -> Value {
    json!({
        "type": "object",
        "required": ["instance_id", "predicted_class", "class_name", "true_class", "correct",
                     "dissimilarity", "flagged", "status", "top_feature", "rf_cam_url", "grad_cam_url"],
        "properties": {
            "instance_id": { "type": "string" },
            "predicted_class": { "type": "integer", "minimum": 0 },
            "class_name": { "type": "string" },
            "true_class": { "type": "integer", "minimum": 0 },
            "correct": { "type": "boolean" },
            "dissimilarity": { "type": "number", "minimum": 0 },
            "flagged": { "type": "boolean" },
            "status": { "enum": STATUSES },
            "top_feature": { "type": "integer", "minimum": 0 },
            "rf_cam_url": nullable("string"),
            "grad_cam_url": nullable("string")
        }
    })
}

fn review_event() -> Value {
    json!({
        "type": "object",
        "required": ["timestamp", "instance_id", "action", "actor"],
        "properties": {
            "timestamp": { "type": "string" },
            "instance_id": { "type": "string" },
            "action": { "enum": ["confirm", "reject", "auto_flag"] },
            "actor": { "type": "string" },
            "note": { "type": "string" },
            "feature": { "type": "integer", "minimum": 0 },
            "source": { "type": "string" }
        }
    })
}

/// One schema per endpoint response plus the review request body.
pub fn schemas() -> Value {
    json!({
        "Health": {
            "type": "object",
            "required": ["status"],
            "properties": { "status": { "enum": ["ok"] } }
        },
        "InstanceSummary": instance_summary(),
        "InstancePage": {
            "type": "object",
            "required": ["items", "total", "page", "page_size"],
            "properties": {
                "items": { "type": "array", "items": instance_summary() },
                "total": { "type": "integer", "minimum": 0 },
                "page": { "type": "integer", "minimum": 1 },
                "page_size": { "type": "integer", "minimum": 1, "maximum": 500 }
            }
        },
        "InstanceDetail": {
            "type": "object",
            "required": ["instance", "warning", "shap_base_value", "top_attributions", "mse_threshold", "history"],
            "properties": {
                "instance": instance_summary(),
                "warning": nullable("string"),
                "shap_base_value": nullable("number"),
                "top_attributions": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["feature", "alpha"],
                        "properties": {
                            "feature": { "type": "integer", "minimum": 0 },
                            "alpha": { "type": "number" }
                        }
                    }
                },
                "mse_threshold": { "type": "number" },
                "history": { "type": "array", "items": review_event() }
            }
        },
        "ReviewRequest": {
            "type": "object",
            "required": ["decision"],
            "properties": {
                "decision": { "enum": ["confirm", "reject"] },
                "note": nullable("string"),
                "actor": nullable("string")
            }
        },
        "ReviewResponse": {
            "type": "object",
            "required": ["record", "auto_flagged"],
            "properties": {
                "record": instance_summary(),
                "auto_flagged": { "type": "array", "items": { "type": "string" } }
            }
        },
        "SimilarResponse": {
            "type": "object",
            "required": ["query_instance", "feature", "class_index", "hits"],
            "properties": {
                "query_instance": { "type": "string" },
                "feature": { "type": "integer", "minimum": 0 },
                "class_index": { "type": "integer", "minimum": 0 },
                "hits": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["instance_id", "score", "status", "dissimilarity", "grad_cam_url", "rf_cam_url"],
                        "properties": {
                            "instance_id": { "type": "string" },
                            "score": { "type": "number" },
                            "status": { "enum": STATUSES },
                            "dissimilarity": { "type": "number", "minimum": 0 },
                            "grad_cam_url": nullable("string"),
                            "rf_cam_url": nullable("string")
                        }
                    }
                }
            }
        },
        "Summary": {
            "type": "object",
            "required": ["total", "flagged", "status_counts", "per_class", "groups", "event_count",
                         "mse_threshold", "mask_threshold"],
            "properties": {
                "total": { "type": "integer", "minimum": 0 },
                "flagged": { "type": "integer", "minimum": 0 },
                "status_counts": status_counts(),
                "per_class": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["class_index", "class_name", "total", "flagged", "status_counts"],
                        "properties": {
                            "class_index": { "type": "integer", "minimum": 0 },
                            "class_name": { "type": "string" },
                            "total": { "type": "integer", "minimum": 0 },
                            "flagged": { "type": "integer", "minimum": 0 },
                            "status_counts": status_counts()
                        }
                    }
                },
                "groups": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["instance_id", "feature", "confirmed_at", "auto_flagged"],
                        "properties": {
                            "instance_id": { "type": "string" },
                            "feature": nullable("integer"),
                            "confirmed_at": { "type": "string" },
                            "auto_flagged": { "type": "array", "items": { "type": "string" } }
                        }
                    }
                },
                "event_count": { "type": "integer", "minimum": 0 },
                "mse_threshold": { "type": "number" },
                "mask_threshold": { "type": "number" }
            }
        },
        "Error": {
            "type": "object",
            "required": ["error"],
            "properties": {
                "error": { "type": "string" },
                "field": { "type": "string" },
                "status": { "enum": STATUSES }
            }
        }
    })
}
