//! HTTP session service.
//!
//! | method | path | body | success |
//! |---|---|---|---|
//! | `POST` | `/sessions` | `{"image_id" or "image_base64", "box": [x0, y0, x1, y1]}` | 201 |
//! | `POST` | `/sessions/{id}/refine` | `{"scribbles": {"foreground": [[x, y, len]], "background": [...]}, "config": {...}}` | 200 |
//! | `GET` | `/sessions/{id}` | | 200 |
//! | `GET` | `/sessions/{id}/snapshots` | | 200 |
//! | `DELETE` | `/sessions/{id}` | | 204 |
//! | `GET` | `/health` | | 200 |
//!
//! Masks are returned in full-image coordinates as [`RleMask`]. Scribbles are
//! given in crop coordinates, i.e. relative to the box's top-left corner.
//! `config` overrides fields of the server's default [`RefineConfig`].
//! Errors are `{"error": kind, "message": text}` plus `"pixels"` for scribble
//! conflicts.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Error;
use crate::grid::{BoundingBox, Grid2D};
use crate::io::{decode_image, load_image};
use crate::nn::SegmenterModel;
use crate::pipeline::{init_segment, RefineConfig, Session, SessionConfig};
use crate::rle::{encode, ScribbleRuns};

/// What a refine request does when the session is already refining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BusyPolicy {
    /// Wait for the running request.
    #[default]
    Queue,
    /// Answer 409 immediately.
    Reject,
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Directory that `image_id` values are looked up in.
    pub image_dir: Option<PathBuf>,
    pub max_image_pixels: usize,
    pub max_body_bytes: usize,
    pub idle_timeout: Duration,
    pub busy: BusyPolicy,
    pub session: SessionConfig,
    pub refine: RefineConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            image_dir: None,
            max_image_pixels: 4096 * 4096,
            max_body_bytes: 32 << 20,
            idle_timeout: Duration::from_secs(30 * 60),
            busy: BusyPolicy::Queue,
            session: SessionConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

struct Slot {
    created_ms: u128,
    session: Arc<tokio::sync::Mutex<Session>>,
    last_used: Mutex<Instant>,
}

struct Inner {
    model: Arc<SegmenterModel>,
    model_id: String,
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
    next_id: AtomicU64,
}

/// Shared server state; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(model: Arc<SegmenterModel>, model_id: impl Into<String>, cfg: ServiceConfig) -> Self {
        AppState(Arc::new(Inner {
            model,
            model_id: model_id.into(),
            cfg,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }))
    }

    pub fn session_count(&self) -> usize {
        self.0.sessions.lock().unwrap().len()
    }

    /// Drops sessions idle for longer than the timeout; returns how many.
    pub fn expire_idle(&self) -> usize {
        let timeout = self.0.cfg.idle_timeout;
        let mut map = self.0.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, slot| slot.last_used.lock().unwrap().elapsed() <= timeout);
        before - map.len()
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.expire_idle();
        let slot = self.0.sessions.lock().unwrap().get(id).cloned();
        let slot = slot.ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}")))?;
        *slot.last_used.lock().unwrap() = Instant::now();
        Ok(slot)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: json!({ "error": kind, "message": message.into() }) }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::ScribbleConflict(pixels) => ApiError {
                status: StatusCode::CONFLICT,
                body: json!({ "error": "scribble_conflict", "message": message, "pixels": pixels }),
            },
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
            }
            ref e if e.is_numeric() => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "numeric_failure", message),
            Error::Io(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", message),
            _ => ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    image_id: Option<String>,
    image_base64: Option<String>,
    #[serde(rename = "box")]
    bbox: [usize; 4],
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RefineRequest {
    #[serde(default)]
    scribbles: ScribbleRuns,
    #[serde(default)]
    config: Option<Value>,
}

fn valid_image_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
}

fn resolve_image(cfg: &ServiceConfig, req: &CreateRequest) -> ApiResult<Grid2D> {
    let image = match (&req.image_id, &req.image_base64) {
        (Some(id), None) => {
            let dir = cfg.image_dir.as_ref().ok_or_else(|| {
                ApiError::new(StatusCode::NOT_FOUND, "not_found", "this server has no image directory")
            })?;
            let path = dir.join(id);
            if !valid_image_id(id) || !path.is_file() {
                return Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown image {id:?}")));
            }
            load_image(path)?
        }
        (None, Some(b64)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", e.to_string()))?;
            decode_image(&bytes)?
        }
        _ => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_request",
                "give exactly one of image_id and image_base64",
            ))
        }
    };
    if image.pixels() > cfg.max_image_pixels {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "image_too_large",
            format!("{}x{} exceeds {} pixels", image.width(), image.height(), cfg.max_image_pixels),
        ));
    }
    Ok(image)
}

fn merge(base: &mut Value, overrides: &Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// `base` with the fields present in `overrides` replaced.
pub fn apply_overrides(base: &RefineConfig, overrides: Option<&Value>) -> crate::Result<RefineConfig> {
    let Some(o) = overrides else { return Ok(base.clone()) };
    if !o.is_object() {
        return Err(Error::InvalidConfig("config overrides must be a JSON object".into()));
    }
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, o);
    let cfg: RefineConfig = serde_json::from_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn probability_summary(p: &Grid2D) -> Value {
    let v = p.channel(0);
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64;
    let (min, max) = p.min_max();
    json!({ "mean": mean, "min": min, "max": max, "above_half": v.iter().filter(|&&x| x > 0.5).count() })
}

fn session_state(id: &str, model_id: &str, created_ms: u128, s: &Session) -> Value {
    let b = s.bbox();
    json!({
        "session_id": id,
        "model_id": model_id,
        "created_unix_ms": created_ms as u64,
        "box": [b.x_min, b.y_min, b.x_max, b.y_max],
        "image_size": [s.image_size().0, s.image_size().1],
        "crop_size": [s.crop_size().0, s.crop_size().1],
        "mask": encode(&s.final_labels()),
        "scribble_count": s.scribbles().len(),
        "history": s.history(),
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    state.expire_idle();
    let req: CreateRequest = parse_body(&body)?;
    let [x0, y0, x1, y1] = req.bbox;
    let bbox = BoundingBox::new(x0, y0, x1, y1)?;
    let st = state.clone();
    let session = blocking(move || {
        let image = resolve_image(&st.0.cfg, &req)?;
        Ok(init_segment(st.0.model.clone(), &image, bbox, &st.0.cfg.session)?)
    })
    .await?;

    let id = format!("s{:08x}", state.0.next_id.fetch_add(1, Ordering::Relaxed));
    let created_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let mut body = session_state(&id, &state.0.model_id, created_ms, &session);
    body["probability"] = probability_summary(session.probability());
    body["diagnostics"] = session.diagnostics_json();
    let slot = Slot {
        created_ms,
        session: Arc::new(tokio::sync::Mutex::new(session)),
        last_used: Mutex::new(Instant::now()),
    };
    state.0.sessions.lock().unwrap().insert(id, Arc::new(slot));
    Ok((StatusCode::CREATED, Json(body)))
}

async fn refine_session(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let slot = state.slot(&id)?;
    let req: RefineRequest = if body.is_empty() { RefineRequest::default() } else { parse_body(&body)? };
    let cfg = apply_overrides(&state.0.cfg.refine, req.config.as_ref())?;
    let mut guard = match state.0.cfg.busy {
        BusyPolicy::Queue => slot.session.clone().lock_owned().await,
        BusyPolicy::Reject => slot.session.clone().try_lock_owned().map_err(|_| {
            ApiError::new(StatusCode::CONFLICT, "busy", format!("session {id} is already refining"))
        })?,
    };
    let model_id = state.0.model_id.clone();
    let created_ms = slot.created_ms;
    let out = blocking(move || {
        let (w, h) = guard.crop_size();
        let scribbles = req.scribbles.to_scribbles(w, h)?;
        let record = guard.refine(&scribbles, &cfg)?.clone();
        let mut body = session_state(&id, &model_id, created_ms, &guard);
        body["round"] = serde_json::to_value(&record).map_err(Error::from)?;
        body["wall_ms"] = json!(record.wall_ms);
        body["diagnostics"] = guard.diagnostics_json();
        Ok(body)
    })
    .await?;
    *slot.last_used.lock().unwrap() = Instant::now();
    Ok(Json(out))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = state.slot(&id)?;
    let s = slot.session.lock().await;
    Ok(Json(session_state(&id, &state.0.model_id, slot.created_ms, &s)))
}

async fn get_snapshots(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = state.slot(&id)?;
    let s = slot.session.lock().await;
    let snaps: Vec<Value> = s
        .snapshots()
        .iter()
        .map(|snap| json!({ "round": snap.round, "iteration": snap.iteration, "mask": encode(&s.to_image_frame(&snap.labels)) }))
        .collect();
    Ok(Json(json!({ "session_id": id, "snapshots": snaps })))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    state.expire_idle();
    match state.0.sessions.lock().unwrap().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"))),
    }
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "model_id": state.0.model_id, "sessions": state.session_count() }))
}

pub fn router(state: AppState) -> Router {
    let limit = state.0.cfg.max_body_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/refine", post(refine_session))
        .route("/sessions/{id}/snapshots", get(get_snapshots))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until the process is stopped, sweeping idle sessions periodically.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let sweeper = state.clone();
    let period = (state.0.cfg.idle_timeout / 4).max(Duration::from_secs(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper.expire_idle();
            if n > 0 {
                log::info!("expired {n} idle session(s)");
            }
        }
    });
    axum::serve(listener, router(state)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_merge_nested_fields() {
        let base = RefineConfig::default();
        let o = json!({ "omega": 2.0, "energy": { "lambda": 1.0 } });
        let c = apply_overrides(&base, Some(&o)).unwrap();
        assert_eq!(c.omega, 2.0);
        assert_eq!(c.energy.lambda, 1.0);
        assert_eq!(c.energy.sigma, base.energy.sigma);
        assert_eq!(c.t1, base.t1);
        assert!(apply_overrides(&base, Some(&json!({ "nope": 1 }))).is_err());
        assert!(apply_overrides(&base, Some(&json!({ "t0": 0.9 }))).is_err());
        assert!(apply_overrides(&base, Some(&json!([1]))).is_err());
        assert_eq!(apply_overrides(&base, None).unwrap(), base);
    }

    #[test]
    fn image_ids_cannot_escape_the_directory() {
        assert!(valid_image_id("case_01.png"));
        for bad in ["", "../x.png", "a/b.png", ".hidden", "a\\b"] {
            assert!(!valid_image_id(bad), "{bad}");
        }
    }

    #[test]
    fn error_status_mapping() {
        let s = |e: Error| ApiError::from(e).status;
        assert_eq!(s(Error::ScribbleConflict(vec![(1, 2)])), StatusCode::CONFLICT);
        assert_eq!(s(Error::InvalidBox("x".into())), StatusCode::BAD_REQUEST);
        assert_eq!(s(Error::NonFinite("x".into())), StatusCode::INTERNAL_SERVER_ERROR);
        assert_eq!(s(std::io::Error::from(std::io::ErrorKind::NotFound).into()), StatusCode::NOT_FOUND);
    }
}
