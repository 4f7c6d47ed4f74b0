#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rfcam_core::pipeline::{run_detection, save_surrogates, train_surrogates, RECORDS_FILE};
use rfcam_core::{BoostConfig, DetectionConfig, DetectionRecord, FixtureSpec};
use rfcam_review::{ReviewService, ServiceOptions};
use serde_json::Value;
use tower::ServiceExt;

pub struct Template {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
    pub records: Vec<DetectionRecord>,
}

impl Template {
    pub fn records_path(&self) -> PathBuf {
        self.root.join(RECORDS_FILE)
    }
}

/// A detected default fixture shared by every test in the binary. Tests
/// never write into it: each service gets its own event log.
pub fn template() -> &'static Template {
    static T: OnceLock<Template> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("bundle");
        let (bundle, _) = rfcam_core::fixture_gen(&FixtureSpec::default(), &root).unwrap();
        let outcome = train_surrogates(&bundle, &BoostConfig::default(), None).unwrap();
        save_surrogates(&root, &outcome).unwrap();
        let (records, _) = run_detection(&bundle, &outcome.models, &DetectionConfig::default(), &root, None).unwrap();
        Template { _dir: dir, root, records }
    })
}

/// Opens a service over the template with its event log under `events_dir`.
pub fn open_service(events_dir: &std::path::Path, options: ServiceOptions) -> ReviewService {
    let t = template();
    let options = ServiceOptions {
        events_path: Some(events_dir.join("events.jsonl")),
        ..options
    };
    ReviewService::open(&t.records_path(), &t.root, options).unwrap()
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes)
            .unwrap_or_else(|e| panic!("not json ({e}): {}", String::from_utf8_lossy(&self.bytes)))
    }
}

pub async fn call(router: &Router, method: &str, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = router.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        content_type,
        bytes,
    }
}

pub async fn get_json(router: &Router, uri: &str) -> Value {
    let r = call(router, "GET", uri, None).await;
    assert_eq!(r.status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&r.bytes));
    r.json()
}

/// Validates `v` against the subset of JSON Schema used by `/api/schema`:
/// type, enum, required, properties, items, minimum, maximum.
pub fn validate(schema: &Value, v: &Value, path: &str) -> Result<(), String> {
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().map(|x| x.as_str().unwrap()).collect(),
            _ => return Err(format!("{path}: bad type keyword")),
        };
        let ok = types.iter().any(|t| match *t {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "boolean" => v.is_boolean(),
            "null" => v.is_null(),
            "number" => v.is_number(),
            "integer" => v.is_u64() || v.is_i64(),
            _ => false,
        });
        if !ok {
            return Err(format!("{path}: expected {types:?}, got {v}"));
        }
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            return Err(format!("{path}: {v} not in {e:?}"));
        }
    }
    if let Some(n) = v.as_f64() {
        if let Some(min) = schema.get("minimum").and_then(Value::as_f64) {
            if n < min {
                return Err(format!("{path}: {n} < {min}"));
            }
        }
        if let Some(max) = schema.get("maximum").and_then(Value::as_f64) {
            if n > max {
                return Err(format!("{path}: {n} > {max}"));
            }
        }
    }
    if let Some(obj) = v.as_object() {
        for r in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = r.as_str().unwrap();
            if !obj.contains_key(key) {
                return Err(format!("{path}: missing {key}"));
            }
        }
        if let Some(props) = schema.get("properties").and_then(Value::as_object) {
            for (k, sub) in props {
                if let Some(x) = obj.get(k) {
                    validate(sub, x, &format!("{path}.{k}"))?;
                }
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for (i, x) in arr.iter().enumerate() {
            validate(items, x, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}
