//! Local HTTP review service: serves the current report, flag queue, image
//! slices and the decision log, and re-curates on request.
//!
//! Readers take a cheap snapshot (`Arc`) of the current report, so every
//! response reflects exactly one version. Decision appends go through a
//! single writer lock; re-curation is exclusive and concurrent requests get
//! 409.

use std::collections::{HashMap, VecDeque};
use std::io::Cursor;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DurationRound, TimeDelta, Utc};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::curation::{RelationshipLabel, Verdict};
use crate::error::{Error, Result};
use crate::formats::{append_decision, read_decisions, DecisionRecord};
use crate::report::ReportDocument;
use crate::volume::{load_volume, Volume};

const VOLUME_CACHE: usize = 8;

struct Snapshot {
    report: ReportDocument,
    json: Bytes,
    index: HashMap<String, u32>,
}

impl Snapshot {
    fn new(report: ReportDocument) -> Arc<Snapshot> {
        let json = Bytes::from(report.to_json());
        let index = report
            .images
            .iter()
            .enumerate()
            .map(|(i, m)| (m.image_id.clone(), i as u32))
            .collect();
        Arc::new(Snapshot { report, json, index })
    }
}

pub struct ReviewState {
    current: RwLock<Arc<Snapshot>>,
    decisions_path: PathBuf,
    decision_writer: tokio::sync::Mutex<()>,
    recurating: tokio::sync::Mutex<()>,
    volumes: Option<HashMap<String, PathBuf>>,
    cache: Mutex<VecDeque<(String, Arc<Volume>)>>,
}

impl ReviewState {
    /// `volumes` maps image ids to files; `None` disables slice rendering.
    pub fn new(report: ReportDocument, decisions_path: PathBuf, volumes: Option<HashMap<String, PathBuf>>) -> Result<Self> {
        report.validate()?;
        // an unreadable log is a startup error, not a runtime surprise
        let existing = read_decisions(&decisions_path)?;
        report.resolve_decisions(&existing)?;
        Ok(ReviewState {
            current: RwLock::new(Snapshot::new(report)),
            decisions_path,
            decision_writer: tokio::sync::Mutex::new(()),
            recurating: tokio::sync::Mutex::new(()),
            volumes,
            cache: Mutex::new(VecDeque::new()),
        })
    }

    pub fn open(report_path: &FsPath, decisions_path: PathBuf, volumes: Option<HashMap<String, PathBuf>>) -> Result<Self> {
        Self::new(ReportDocument::read(report_path)?, decisions_path, volumes)
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("report lock").clone()
    }

    pub fn report_version(&self) -> u64 {
        self.snapshot().report.version
    }

    fn cached_volume(&self, id: &str) -> Option<Arc<Volume>> {
        let cache = self.cache.lock().expect("cache lock");
        cache.iter().find(|(k, _)| k == id).map(|(_, v)| v.clone())
    }

    fn remember_volume(&self, id: &str, v: Arc<Volume>) {
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.iter().any(|(k, _)| k == id) {
            return;
        }
        if cache.len() == VOLUME_CACHE {
            cache.pop_front();
        }
        cache.push_back((id.to_string(), v));
    }
}

pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            error,
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }

    fn internal(e: Error) -> Self {
        let status = if matches!(e, Error::Invariant(_)) {
            StatusCode::INTERNAL_SERVER_ERROR
        } else {
            StatusCode::UNPROCESSABLE_ENTITY
        };
        Self::new(status, "curation_failed", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.error, "detail": self.detail }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn report_response(snap: &Snapshot) -> Response {
    let mut resp = (
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
        snap.json.clone(),
    )
        .into_response();
    resp.headers_mut()
        .insert("x-report-version", HeaderValue::from(snap.report.version));
    resp
}

async fn get_report(State(st): State<Arc<ReviewState>>) -> Response {
    report_response(&st.snapshot())
}

#[derive(Deserialize)]
struct FlagQuery {
    label: Option<String>,
    min_severity: Option<String>,
}

async fn get_flags(State(st): State<Arc<ReviewState>>, Query(q): Query<FlagQuery>) -> ApiResult<Response> {
    let label = match q.label.as_deref() {
        None | Some("") => None,
        Some(l) => Some(l.parse::<RelationshipLabel>().map_err(|_| {
            ApiError::bad_request(format!("unknown label {l:?}; allowed values: SM, MZ, DZ, FS, UR"))
        })?),
    };
    let min = match q.min_severity.as_deref() {
        None | Some("") => f64::NEG_INFINITY,
        Some(s) => s
            .parse::<f64>()
            .ok()
            .filter(|x| !x.is_nan())
            .ok_or_else(|| ApiError::bad_request(format!("min_severity must be a number, got {s:?}")))?,
    };
    let snap = st.snapshot();
    let flags: Vec<_> = snap
        .report
        .flags
        .iter()
        .filter(|f| label.map_or(true, |l| f.label == l) && f.severity >= min)
        .collect();
    let mut resp = Json(flags).into_response();
    resp.headers_mut()
        .insert("x-report-version", HeaderValue::from(snap.report.version));
    Ok(resp)
}

#[derive(Deserialize)]
struct SliceQuery {
    axis: Option<String>,
    index: Option<String>,
}

/// Renders one axis-aligned slice as 8-bit grayscale, mapping the volume's
/// full intensity range to 0..=255. Rows run along the second in-plane axis.
pub fn render_slice_png(v: &Volume, axis: usize, index: usize) -> Result<Vec<u8>> {
    let dims = v.dims();
    if index >= dims[axis] {
        return Err(Error::Config(format!("index {index} out of range for axis of length {}", dims[axis])));
    }
    let (u, w) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    let mut pixels = Vec::with_capacity(dims[u] * dims[w]);
    for j in 0..dims[w] {
        for i in 0..dims[u] {
            let mut p = [0usize; 3];
            p[axis] = index;
            p[u] = i;
            p[w] = j;
            let x = v.get(p[0], p[1], p[2]);
            let g = if range > 0.0 { ((x - lo) / range * 255.0).round() } else { 0.0 };
            pixels.push(g.clamp(0.0, 255.0) as u8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut out), dims[u] as u32, dims[w] as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Invariant(format!("png header: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::Invariant(format!("png data: {e}")))?;
    }
    Ok(out)
}

async fn get_slice(
    State(st): State<Arc<ReviewState>>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let Some(volumes) = &st.volumes else {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "volumes_unavailable",
            "the service was started without volume paths",
        ));
    };
    let path = volumes
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_image", format!("no volume registered for {id:?}")))?
        .clone();
    let axis = match q.axis.as_deref() {
        Some("x") => 0,
        Some("y") => 1,
        Some("z") | None => 2,
        Some(a) => return Err(ApiError::bad_request(format!("axis must be x, y or z, got {a:?}"))),
    };
    let index: usize = match q.index.as_deref() {
        None => return Err(ApiError::bad_request("index is required")),
        Some(s) => s
            .parse()
            .map_err(|_| ApiError::bad_request(format!("index must be a non-negative integer, got {s:?}")))?,
    };
    let vol = match st.cached_volume(&id) {
        Some(v) => v,
        None => {
            let v = tokio::task::spawn_blocking(move || load_volume(&path))
                .await
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unreadable_volume", e.to_string()))?;
            let v = Arc::new(v);
            st.remember_volume(&id, v.clone());
            v
        }
    };
    let len = vol.dims()[axis];
    if index >= len {
        return Err(ApiError::new(
            StatusCode::RANGE_NOT_SATISFIABLE,
            "index_out_of_range",
            format!("index {index} is outside 0..{len}"),
        ));
    }
    let png = render_slice_png(&vol, axis, index).map_err(ApiError::internal)?;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=3600")),
        ],
        png,
    )
        .into_response())
}

async fn post_decision(State(st): State<Arc<ReviewState>>, body: Bytes) -> ApiResult<Response> {
    let v: serde_json::Value =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("body is not JSON: {e}")))?;
    let verdict: Verdict = match v.get("verdict").and_then(|x| x.as_str()) {
        Some(s) => s.parse().map_err(|e: Error| ApiError::bad_request(e.to_string()))?,
        None => return Err(ApiError::bad_request("verdict is required (same, different or unsure)")),
    };
    let pair: [String; 2] = v
        .get("pair")
        .cloned()
        .and_then(|p| serde_json::from_value(p).ok())
        .ok_or_else(|| ApiError::bad_request("pair must be a two-element array of image ids"))?;
    let curator = v
        .get("curator")
        .and_then(|x| x.as_str())
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| ApiError::bad_request("curator is required"))?
        .to_string();
    if pair[0] == pair[1] {
        return Err(ApiError::bad_request("a pair needs two different images"));
    }
    let snap = st.snapshot();
    for id in &pair {
        if !snap.index.contains_key(id) {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown_pair",
                format!("image {id:?} is not in the report"),
            ));
        }
    }
    let record = DecisionRecord {
        pair,
        verdict,
        curator,
        timestamp: Utc::now()
            .duration_trunc(TimeDelta::milliseconds(1))
            .expect("millisecond truncation"),
    };
    {
        let _w = st.decision_writer.lock().await;
        let path = st.decisions_path.clone();
        let rec = record.clone();
        tokio::task::spawn_blocking(move || append_decision(&path, &rec))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "log_write_failed", e.to_string()))?;
    }
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn get_decisions(State(st): State<Arc<ReviewState>>) -> ApiResult<Response> {
    let _w = st.decision_writer.lock().await;
    let recs = read_decisions(&st.decisions_path)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "log_read_failed", e.to_string()))?;
    Ok(Json(recs).into_response())
}

async fn post_recurate(State(st): State<Arc<ReviewState>>) -> ApiResult<Response> {
    let Ok(_guard) = st.recurating.try_lock() else {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "recurate_in_progress",
            "another re-curation is running",
        ));
    };
    let records = {
        let _w = st.decision_writer.lock().await;
        read_decisions(&st.decisions_path)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "log_read_failed", e.to_string()))?
    };
    let snap = st.snapshot();
    let next = tokio::task::spawn_blocking(move || {
        let decisions = snap.report.resolve_decisions(&records)?;
        let params = snap.report.config.pipeline.flags.clone();
        snap.report.curated(&params, &decisions)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
    .map_err(ApiError::internal)?;
    let snap = Snapshot::new(next);
    *st.current.write().expect("report lock") = snap.clone();
    Ok(report_response(&snap))
}

pub fn router(state: Arc<ReviewState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/report", get(get_report))
        .route("/api/flags", get(get_flags))
        .route("/api/images/:id/slice", get(get_slice))
        .route("/api/decisions", post(post_decision).get(get_decisions))
        .route("/api/recurate", post(post_recurate))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

/// Binds and serves until the process is stopped.
pub async fn serve(bind: &str, state: Arc<ReviewState>, ui_dir: Option<PathBuf>) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {bind}: {e}")))?;
    log::info!("review service listening on http://{}", listener.local_addr().map_err(|e| Error::io(bind, e))?);
    axum::serve(listener, router(state, ui_dir))
        .await
        .map_err(|e| Error::io(bind, e))
}
