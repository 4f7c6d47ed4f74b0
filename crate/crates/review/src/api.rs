//! JSON API, media and static routes.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rfcam_core::detector::{DetectionConfig, DetectionRecord, ReviewStatus};
use rfcam_core::pipeline::{read_records, read_report, REPORT_FILE};
use rfcam_core::retrieval::{ActivationIndex, FeatureIndex};
use rfcam_core::tensor_store::{load_bundle, Split};
use serde::{Deserialize, Serialize};

use crate::events::{now_timestamp, read_events, EventLog, ReviewAction, ReviewEvent};
use crate::state::{CorrelationGroup, ReviewState, TransitionError};
use crate::{ServiceError, EVENTS_FILE};

const MAX_PAGE_SIZE: usize = 500;
const MAX_SIMILAR: usize = 100;

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    /// Retrieval depth for auto-flagging on confirm.
    pub top_n: usize,
    pub default_actor: String,
    /// Directory with the review console's built assets, served under `/`.
    pub static_dir: Option<PathBuf>,
    /// Defaults to `events.jsonl` beside the records file.
    pub events_path: Option<PathBuf>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            top_n: 10,
            default_actor: "reviewer".into(),
            static_dir: None,
            events_path: None,
        }
    }
}

struct Inner {
    snapshot: RwLock<Arc<ReviewState>>,
    writer: tokio::sync::Mutex<EventLog>,
    index: ActivationIndex,
    class_names: Vec<String>,
    run_dir: PathBuf,
    detection: DetectionConfig,
    options: ServiceOptions,
}

#[derive(Clone)]
pub struct ReviewService {
    inner: Arc<Inner>,
}

// ---- response types ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub instance_id: String,
    pub predicted_class: usize,
    pub class_name: String,
    pub true_class: usize,
    pub correct: bool,
    pub dissimilarity: f64,
    pub flagged: bool,
    pub status: ReviewStatus,
    pub top_feature: usize,
    pub rf_cam_url: Option<String>,
    pub grad_cam_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePage {
    pub items: Vec<InstanceSummary>,
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub feature: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDetail {
    pub instance: InstanceSummary,
    pub warning: Option<String>,
    pub shap_base_value: Option<f64>,
    /// Largest attributions by magnitude.
    pub top_attributions: Vec<Attribution>,
    pub mse_threshold: f64,
    pub history: Vec<ReviewEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub decision: String,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub actor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewResponse {
    pub record: InstanceSummary,
    pub auto_flagged: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarHit {
    pub instance_id: String,
    pub score: f64,
    pub status: ReviewStatus,
    pub dissimilarity: f64,
    pub grad_cam_url: Option<String>,
    pub rf_cam_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarResponse {
    pub query_instance: String,
    pub feature: usize,
    pub class_index: usize,
    pub hits: Vec<SimilarHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_index: usize,
    pub class_name: String,
    pub total: usize,
    pub flagged: usize,
    pub status_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total: usize,
    pub flagged: usize,
    pub status_counts: BTreeMap<String, usize>,
    pub per_class: Vec<ClassSummary>,
    pub groups: Vec<CorrelationGroup>,
    pub event_count: usize,
    pub mse_threshold: f64,
    pub mask_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<ReviewStatus>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub code: StatusCode,
    pub body: ApiErrorBody,
}

impl ApiError {
    fn new(code: StatusCode, msg: impl Into<String>) -> Self {
        Self {
            code,
            body: ApiErrorBody {
                error: msg.into(),
                field: None,
                status: None,
            },
        }
    }

    fn bad_field(field: &str, msg: impl Into<String>) -> Self {
        let mut e = Self::new(StatusCode::BAD_REQUEST, msg);
        e.body.field = Some(field.into());
        e
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown instance {id}"))
    }

    fn internal(msg: impl std::fmt::Display) -> Self {
        log::error!("{msg}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, msg.to_string())
    }
}

impl From<TransitionError> for ApiError {
    fn from(e: TransitionError) -> Self {
        match &e {
            TransitionError::UnknownInstance(id) => ApiError::not_found(id),
            TransitionError::Conflict { status, .. } => {
                let mut err = ApiError::new(StatusCode::CONFLICT, e.to_string());
                err.body.status = Some(*status);
                err
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

// ---- service ----

fn encode_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl ReviewService {
    /// Loads records, bundle and event log. `records_path` is the detection
    /// run's `records.jsonl`; heatmap paths are resolved beside it.
    pub fn open(records_path: &FsPath, bundle_path: &FsPath, options: ServiceOptions) -> Result<Self, ServiceError> {
        if options.top_n == 0 {
            return Err(rfcam_core::Error::Validation("top_n must be >= 1".into()).into());
        }
        let records = read_records(records_path)?;
        let bundle = load_bundle(bundle_path)?;
        for r in &records {
            if bundle.entry(&r.instance_id).is_none() {
                return Err(rfcam_core::Error::Validation(format!(
                    "record {} is not in the bundle",
                    r.instance_id
                ))
                .into());
            }
        }
        let run_dir = records_path
            .parent()
            .map(FsPath::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let detection = match read_report(&run_dir.join(REPORT_FILE)) {
            Ok(report) => report.config.detection,
            Err(e) => {
                log::warn!("no usable report beside the records ({e}); assuming default thresholds");
                DetectionConfig::default()
            }
        };
        let events_path = options.events_path.clone().unwrap_or_else(|| run_dir.join(EVENTS_FILE));
        let events = read_events(&events_path)?;
        let state = ReviewState::replay(records, &events)
            .map_err(|(i, e)| ServiceError::Log(format!("{} event {}: {e}", events_path.display(), i + 1)))?;
        log::info!("replayed {} review events from {}", events.len(), events_path.display());
        let writer = EventLog::open(&events_path)?;
        let index = ActivationIndex::build(&bundle)?;
        let manifest = bundle.manifest();
        let class_names = if manifest.class_names.is_empty() {
            (0..manifest.num_classes).map(|c| format!("class_{c}")).collect()
        } else {
            manifest.class_names.clone()
        };
        Ok(Self {
            inner: Arc::new(Inner {
                snapshot: RwLock::new(Arc::new(state)),
                writer: tokio::sync::Mutex::new(writer),
                index,
                class_names,
                run_dir,
                detection,
                options,
            }),
        })
    }

    /// Current state. Cheap: clones an `Arc`.
    pub fn snapshot(&self) -> Arc<ReviewState> {
        self.inner.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/api/health", get(health))
            .route("/api/summary", get(summary))
            .route("/api/schema", get(schema))
            .route("/api/instances", get(list_instances))
            .route("/api/instances/{id}", get(instance_detail))
            .route("/api/instances/{id}/review", post(review))
            .route("/api/instances/{id}/similar", get(similar))
            .route("/media/{id}/{file}", get(media))
            .fallback(static_asset)
            .with_state(self.clone())
    }

    pub async fn flush(&self) -> Result<(), ServiceError> {
        self.inner.writer.lock().await.flush()
    }

    fn class_name(&self, c: usize) -> String {
        self.inner.class_names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"))
    }

    fn summary_of(&self, r: &DetectionRecord) -> InstanceSummary {
        let url = |kind: &str| {
            r.map_paths
                .as_ref()
                .map(|_| format!("/media/{}/{kind}.png", encode_segment(&r.instance_id)))
        };
        InstanceSummary {
            instance_id: r.instance_id.clone(),
            predicted_class: r.predicted_class,
            class_name: self.class_name(r.predicted_class),
            true_class: r.true_class,
            correct: r.predicted_class == r.true_class,
            dissimilarity: r.dissimilarity,
            flagged: r.flagged,
            status: r.status,
            top_feature: r.top_feature,
            rf_cam_url: url("rf"),
            grad_cam_url: url("gc"),
        }
    }

    pub fn summary(&self) -> Summary {
        let state = self.snapshot();
        let per_class = (0..self.inner.class_names.len())
            .map(|c| {
                let recs: Vec<_> = state.records().filter(|r| r.predicted_class == c).collect();
                ClassSummary {
                    class_index: c,
                    class_name: self.class_name(c),
                    total: recs.len(),
                    flagged: recs.iter().filter(|r| r.flagged).count(),
                    status_counts: ReviewState::status_counts(recs.into_iter()),
                }
            })
            .collect();
        Summary {
            total: state.len(),
            flagged: state.records().filter(|r| r.flagged).count(),
            status_counts: ReviewState::status_counts(state.records()),
            per_class,
            groups: state.groups().to_vec(),
            event_count: state.event_count(),
            mse_threshold: self.inner.detection.mse_threshold,
            mask_threshold: self.inner.detection.mask_threshold,
        }
    }

    pub fn list(&self, params: &HashMap<String, String>) -> Result<InstancePage, ApiError> {
        enum StatusFilter {
            Status(ReviewStatus),
            Flagged,
        }
        let status = match params.get("status").map(String::as_str) {
            None | Some("") | Some("all") => None,
            Some("flagged") => Some(StatusFilter::Flagged),
            Some(s) => Some(StatusFilter::Status(ReviewStatus::parse(s).ok_or_else(|| {
                ApiError::bad_field("status", format!("unknown status {s:?}"))
            })?)),
        };
        let class = match params.get("class").map(String::as_str) {
            None | Some("") => None,
            Some(s) => {
                let c: usize = s
                    .parse()
                    .map_err(|_| ApiError::bad_field("class", format!("class must be an integer, got {s:?}")))?;
                if c >= self.inner.class_names.len() {
                    return Err(ApiError::bad_field("class", format!("class {c} out of range")));
                }
                Some(c)
            }
        };
        let number = |name: &str, default: usize| -> Result<usize, ApiError> {
            match params.get(name) {
                None => Ok(default),
                Some(s) => s
                    .parse()
                    .map_err(|_| ApiError::bad_field(name, format!("{name} must be a positive integer"))),
            }
        };
        let page = number("page", 1)?;
        if page == 0 {
            return Err(ApiError::bad_field("page", "page starts at 1"));
        }
        let page_size = number("page_size", 20)?;
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(ApiError::bad_field(
                "page_size",
                format!("page_size must be in 1..={MAX_PAGE_SIZE}"),
            ));
        }

        let state = self.snapshot();
        let mut matching: Vec<&DetectionRecord> = state
            .records()
            .filter(|r| match &status {
                None => true,
                Some(StatusFilter::Flagged) => r.flagged,
                Some(StatusFilter::Status(s)) => r.status == *s,
            })
            .filter(|r| class.is_none_or(|c| r.predicted_class == c))
            .collect();
        matching.sort_by(|a, b| {
            b.dissimilarity
                .total_cmp(&a.dissimilarity)
                .then_with(|| a.instance_id.cmp(&b.instance_id))
        });
        let total = matching.len();
        let items = matching
            .into_iter()
            .skip((page - 1).saturating_mul(page_size))
            .take(page_size)
            .map(|r| self.summary_of(r))
            .collect();
        Ok(InstancePage {
            items,
            total,
            page,
            page_size,
        })
    }

    pub fn detail(&self, id: &str) -> Result<InstanceDetail, ApiError> {
        let state = self.snapshot();
        let r = state.record(id).ok_or_else(|| ApiError::not_found(id))?;
        let mut top: Vec<Attribution> = r
            .shap
            .as_ref()
            .map(|s| {
                s.alpha
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| **a != 0.0)
                    .map(|(feature, &alpha)| Attribution { feature, alpha })
                    .collect()
            })
            .unwrap_or_default();
        top.sort_by(|a, b| b.alpha.abs().total_cmp(&a.alpha.abs()).then(a.feature.cmp(&b.feature)));
        top.truncate(10);
        Ok(InstanceDetail {
            instance: self.summary_of(r),
            warning: r.warning.clone(),
            shap_base_value: r.shap.as_ref().map(|s| s.alpha0),
            top_attributions: top,
            mse_threshold: self.inner.detection.mse_threshold,
            history: state.history(id).to_vec(),
        })
    }

    /// Records a decision. Confirming also auto-flags pending test instances
    /// among the top-N retrieved for the record's top feature.
    pub async fn review(&self, id: &str, req: ReviewRequest) -> Result<ReviewResponse, ApiError> {
        let action = match req.decision.as_str() {
            "confirm" => ReviewAction::Confirm,
            "reject" => ReviewAction::Reject,
            other => {
                return Err(ApiError::bad_field(
                    "decision",
                    format!("decision must be confirm or reject, got {other:?}"),
                ))
            }
        };
        let actor = req
            .actor
            .filter(|a| !a.trim().is_empty())
            .unwrap_or_else(|| self.inner.options.default_actor.clone());
        let note = req.note.filter(|n| !n.is_empty());

        let mut log = self.inner.writer.lock().await;
        let current = self.snapshot();
        let record = current.check(id, action)?.clone();
        let mut next = (*current).clone();
        let timestamp = now_timestamp();
        let mut events = vec![ReviewEvent {
            timestamp: timestamp.clone(),
            instance_id: id.to_string(),
            action,
            actor: actor.clone(),
            note,
            feature: (action == ReviewAction::Confirm).then_some(FeatureIndex(record.top_feature)),
            source: None,
        }];
        next.apply(&events[0])?;

        let mut auto_flagged = Vec::new();
        if action == ReviewAction::Confirm {
            let hits = self
                .inner
                .index
                .similar_instances(
                    record.predicted_class,
                    FeatureIndex(record.top_feature),
                    id,
                    self.inner.options.top_n,
                    Some(Split::Test),
                )
                .map_err(ApiError::internal)?;
            for hit in hits.ranked {
                if next.check(&hit.instance_id, ReviewAction::AutoFlag).is_err() {
                    continue;
                }
                let ev = ReviewEvent {
                    timestamp: timestamp.clone(),
                    instance_id: hit.instance_id.clone(),
                    action: ReviewAction::AutoFlag,
                    actor: actor.clone(),
                    note: None,
                    feature: Some(FeatureIndex(record.top_feature)),
                    source: Some(id.to_string()),
                };
                next.apply(&ev)?;
                events.push(ev);
                auto_flagged.push(hit.instance_id);
            }
        }
        log.append(&events).map_err(ApiError::internal)?;
        let updated = self.summary_of(next.record(id).expect("record exists"));
        *self.inner.snapshot.write().expect("snapshot lock poisoned") = Arc::new(next);
        drop(log);
        log::info!("{id}: {} by {actor}, {} auto-flagged", req.decision, auto_flagged.len());
        Ok(ReviewResponse {
            record: updated,
            auto_flagged,
        })
    }

    pub fn similar(&self, id: &str, n: usize) -> Result<SimilarResponse, ApiError> {
        if n == 0 || n > MAX_SIMILAR {
            return Err(ApiError::bad_field("n", format!("n must be in 1..={MAX_SIMILAR}")));
        }
        let state = self.snapshot();
        let r = state.record(id).ok_or_else(|| ApiError::not_found(id))?;
        let res = self
            .inner
            .index
            .similar_instances(r.predicted_class, FeatureIndex(r.top_feature), id, n, Some(Split::Test))
            .map_err(ApiError::internal)?;
        let hits = res
            .ranked
            .into_iter()
            .filter_map(|h| {
                let rec = state.record(&h.instance_id)?;
                let s = self.summary_of(rec);
                Some(SimilarHit {
                    instance_id: h.instance_id,
                    score: h.score,
                    status: rec.status,
                    dissimilarity: rec.dissimilarity,
                    grad_cam_url: s.grad_cam_url,
                    rf_cam_url: s.rf_cam_url,
                })
            })
            .collect();
        Ok(SimilarResponse {
            query_instance: id.to_string(),
            feature: r.top_feature,
            class_index: r.predicted_class,
            hits,
        })
    }
}

// ---- handlers ----

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into() })
}

async fn summary(State(svc): State<ReviewService>) -> Json<Summary> {
    Json(svc.summary())
}

async fn schema() -> Json<serde_json::Value> {
    Json(crate::schema::schemas())
}

async fn list_instances(
    State(svc): State<ReviewService>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<InstancePage> {
    svc.list(&params).map(Json)
}

async fn instance_detail(State(svc): State<ReviewService>, Path(id): Path<String>) -> ApiResult<InstanceDetail> {
    svc.detail(&id).map(Json)
}

async fn review(State(svc): State<ReviewService>, Path(id): Path<String>, body: Bytes) -> ApiResult<ReviewResponse> {
    let req: ReviewRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_field("body", format!("invalid review request: {e}")))?;
    svc.review(&id, req).await.map(Json)
}

async fn similar(
    State(svc): State<ReviewService>,
    Path(id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<SimilarResponse> {
    let n = match params.get("n") {
        None => 4,
        Some(s) => s
            .parse()
            .map_err(|_| ApiError::bad_field("n", format!("n must be a positive integer, got {s:?}")))?,
    };
    svc.similar(&id, n).map(Json)
}

async fn media(State(svc): State<ReviewService>, Path((id, file)): Path<(String, String)>) -> Response {
    let state = svc.snapshot();
    let Some(paths) = state.record(&id).and_then(|r| r.map_paths.as_ref()) else {
        return ApiError::not_found(&id).into_response();
    };
    let rel = match file.as_str() {
        "rf.png" => &paths.rf_cam,
        "gc.png" => &paths.grad_cam,
        _ => return ApiError::new(StatusCode::NOT_FOUND, format!("no media {file}")).into_response(),
    };
    let path = svc.inner.run_dir.join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())).into_response(),
    }
}

const PLACEHOLDER_PAGE: &str = "<!doctype html>
<html><head><meta charset=\"utf-8\"><title>Review console</title></head>
<body><h1>Review console</h1>
<p>Console assets are not installed. Start the service with <code>--static-dir</code> pointing at the built console, or use the JSON API under <a href=\"/api/summary\">/api</a>.</p>
</body></html>
";

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        Some("ico") => "image/x-icon",
        Some("woff2") => "font/woff2",
        _ => "application/octet-stream",
    }
}

async fn static_asset(State(svc): State<ReviewService>, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    if rel.starts_with("api/") || rel == "api" {
        return ApiError::new(StatusCode::NOT_FOUND, format!("no route {}", uri.path())).into_response();
    }
    let Some(root) = &svc.inner.options.static_dir else {
        if rel.is_empty() || rel == "index.html" {
            return ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], PLACEHOLDER_PAGE).into_response();
        }
        return (StatusCode::NOT_FOUND, "not found").into_response();
    };
    let rel = FsPath::new(if rel.is_empty() { "index.html" } else { rel });
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return (StatusCode::BAD_REQUEST, "invalid path").into_response();
    }
    let mut path = root.join(rel);
    if !path.is_file() {
        // Client-side routes fall back to the app shell.
        path = root.join("index.html");
    }
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => (StatusCode::NOT_FOUND, "not found").into_response(),
    }
}

// ---- serving ----

pub async fn shutdown_signal() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        log::error!("cannot listen for interrupt: {e}");
        std::future::pending::<()>().await;
    }
    log::info!("interrupt received, shutting down");
}

/// Binds `listen` and serves until interrupted.
pub async fn serve(service: ReviewService, listen: &str) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .map_err(|e| ServiceError::Bind(listen.to_string(), e))?;
    log::info!("listening on http://{}", listener.local_addr().map_err(|e| ServiceError::Bind(listen.into(), e))?);
    serve_on(service, listener, shutdown_signal()).await
}

/// Serves on an already bound listener until `shutdown` resolves, then flushes the event log.
pub async fn serve_on(
    service: ReviewService,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let addr = listener
        .local_addr()
        .map_err(|e| ServiceError::Io(PathBuf::from("<listener>"), e))?;
    axum::serve(listener, service.router())
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServiceError::Io(PathBuf::from(addr.to_string()), e))?;
    service.flush().await
}
