//! HTTP inference service: mask-free inpainting, server-held edit sessions
//! and a health probe, all JSON over HTTP.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use shapefree::diffusion::checkpoint::file_hash;
use shapefree::diffusion::{Checkpoint, DiffusionModel};
use shapefree::imaging::{decode_base64_image, png_base64, square_resize};
use shapefree::mask::BinaryMask;
use shapefree::sampler::{random_seed, sample, EditSession, GuidanceConfig, MaskSource, SamplingRule};
use shapefree::Error;

/// Environment variable holding the bind address.
pub const BIND_ENV: &str = "SHAPEFREE_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub checkpoint: PathBuf,
    /// Concurrent inference workers; each holds its own copy of the model.
    pub workers: usize,
    /// Requests allowed to wait for a worker before new ones get 429.
    pub queue_depth: usize,
    pub sessions_dir: PathBuf,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
    pub use_ema: bool,
    /// Defaults that request overrides are applied on top of.
    pub guidance: GuidanceConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model.ckpt"),
            workers: 1,
            queue_depth: 8,
            sessions_dir: PathBuf::from("sessions"),
            cors_origins: Vec::new(),
            use_ema: true,
            guidance: GuidanceConfig {
                steps: 50,
                ..Default::default()
            },
        }
    }
}

/// Per-request changes to the server's default guidance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceOverrides {
    pub s_image: Option<f64>,
    pub s_text: Option<f64>,
    pub steps: Option<usize>,
    pub mask_threshold: Option<f32>,
    pub mask_source: Option<MaskSource>,
    pub seed: Option<u64>,
    pub rule: Option<SamplingRule>,
    pub single_component: Option<bool>,
}

impl GuidanceOverrides {
    /// Applies the overrides; an unpinned seed is drawn fresh.
    pub fn apply(&self, base: &GuidanceConfig) -> GuidanceConfig {
        GuidanceConfig {
            s_image: self.s_image.unwrap_or(base.s_image),
            s_text: self.s_text.unwrap_or(base.s_text),
            steps: self.steps.unwrap_or(base.steps),
            mask_threshold: self.mask_threshold.unwrap_or(base.mask_threshold),
            mask_source: self.mask_source.unwrap_or(base.mask_source),
            seed: self.seed.unwrap_or_else(random_seed),
            rule: self.rule.unwrap_or(base.rule),
            single_component: self.single_component.unwrap_or(base.single_component),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintRequest {
    /// Base64 PNG. Optional when `session_id` names an existing session,
    /// whose current image is then used.
    #[serde(default)]
    pub image: Option<String>,
    pub prompt: String,
    #[serde(default)]
    pub guidance: GuidanceOverrides,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub result_image: String,
    /// Single-channel PNG, 255 inside the mask.
    pub mask: String,
    pub blended_image: String,
    pub seed: u64,
    pub timing_ms: u64,
    pub guidance: GuidanceConfig,
    pub session_id: Option<String>,
    /// Pass to `/v1/session/{id}/apply` to commit this proposal.
    pub proposal_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplyRequest {
    pub proposal_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundView {
    pub index: usize,
    pub caption: String,
    pub guidance: GuidanceConfig,
    pub result_image: String,
    pub mask: String,
    pub blended_image: String,
    pub mask_area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub checkpoint_hash: String,
    pub base_image: String,
    pub current_image: String,
    pub rounds: Vec<RoundView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub ckpt_hash: String,
    pub image_size: i64,
    pub workers: usize,
    pub queue_depth: usize,
}

// ---------------------------------------------------------------------------

/// JSON error body: a stable `error` code plus a human-readable message.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    incident_id: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            incident_id: None,
        }
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        log::error!("incident {id}: {message}");
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: "inference failed; see server log".into(),
            incident_id: Some(id),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownCaption(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_caption", e.to_string()),
            Error::Config(_) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_guidance", e.to_string()),
            Error::Contract(_) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()),
            Error::Image(_) | Error::Parse { .. } => ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", e.to_string()),
            other => ApiError::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({
            "error": self.code,
            "message": self.message,
            "incident_id": self.incident_id,
        });
        let mut resp = (self.status, Json(body)).into_response();
        if self.status == StatusCode::TOO_MANY_REQUESTS {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
        }
        resp
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

// ---------------------------------------------------------------------------

struct Proposal {
    id: String,
    caption: String,
    guidance: GuidanceConfig,
    source_digest: String,
    result: RgbImage,
    mask: BinaryMask,
}

struct SessionSlot {
    session: EditSession,
    pending: Option<Proposal>,
}

pub struct AppState {
    config: ServeConfig,
    ckpt_hash: String,
    image_size: u32,
    models: Mutex<Vec<DiffusionModel>>,
    workers: Semaphore,
    admitted: AtomicUsize,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<SessionSlot>>>>,
}

/// Holds one place in the request queue until dropped.
pub struct Ticket<'a>(&'a AtomicUsize);

impl Drop for Ticket<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl AppState {
    /// Loads `config.workers` copies of the checkpoint.
    pub fn load(config: ServeConfig) -> shapefree::Result<Self> {
        let ckpt = Checkpoint::load(&config.checkpoint)?;
        let hash = file_hash(&config.checkpoint)?;
        let models = (0..config.workers.max(1))
            .map(|_| DiffusionModel::from_checkpoint(&ckpt, config.use_ema))
            .collect::<shapefree::Result<Vec<_>>>()?;
        Self::from_models(models, hash, config)
    }

    pub fn from_models(models: Vec<DiffusionModel>, ckpt_hash: String, mut config: ServeConfig) -> shapefree::Result<Self> {
        let first = models.first().ok_or_else(|| Error::Config("no model to serve".into()))?;
        let image_size = first.config.image_size as u32;
        config.workers = models.len();
        std::fs::create_dir_all(&config.sessions_dir).map_err(|e| Error::Io {
            path: config.sessions_dir.clone(),
            source: e,
        })?;
        Ok(Self {
            workers: Semaphore::new(models.len()),
            models: Mutex::new(models),
            admitted: AtomicUsize::new(0),
            sessions: Mutex::new(HashMap::new()),
            ckpt_hash,
            image_size,
            config,
        })
    }

    /// Takes a queue place, or `None` when workers and queue are all taken.
    pub fn try_admit(&self) -> Option<Ticket<'_>> {
        let cap = self.config.workers + self.config.queue_depth;
        let prev = self.admitted.fetch_add(1, Ordering::SeqCst);
        let t = Ticket(&self.admitted);
        (prev < cap).then_some(t)
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.config.sessions_dir.join(id)
    }

    /// Finds a session in memory or on disk.
    fn find_session(&self, id: &str) -> ApiResult<Option<Arc<tokio::sync::Mutex<SessionSlot>>>> {
        check_session_id(id)?;
        let mut map = self.sessions.lock().unwrap();
        if let Some(s) = map.get(id) {
            return Ok(Some(s.clone()));
        }
        let dir = self.session_dir(id);
        if !dir.join("session.json").exists() {
            return Ok(None);
        }
        let (_, session) = EditSession::load(&dir)?;
        let slot = Arc::new(tokio::sync::Mutex::new(SessionSlot { session, pending: None }));
        map.insert(id.to_string(), slot.clone());
        Ok(Some(slot))
    }

    fn create_session(&self, id: &str, base: RgbImage) -> ApiResult<Arc<tokio::sync::Mutex<SessionSlot>>> {
        let session = EditSession::new(base);
        session.save(&self.session_dir(id), id, Some(&self.ckpt_hash))?;
        let slot = Arc::new(tokio::sync::Mutex::new(SessionSlot { session, pending: None }));
        let mut map = self.sessions.lock().unwrap();
        // A concurrent request may have created it first.
        Ok(map.entry(id.to_string()).or_insert(slot).clone())
    }

    async fn run_sample(&self, image: RgbImage, caption: String, g: GuidanceConfig) -> ApiResult<shapefree::sampler::SampleOutput> {
        let _permit = self.workers.acquire().await.map_err(ApiError::internal)?;
        let model = self.models.lock().unwrap().pop().expect("a permit guarantees a free model");
        let joined = tokio::task::spawn_blocking(move || {
            let out = sample(&model, &image, &caption, &g);
            (model, out)
        })
        .await;
        match joined {
            Ok((model, out)) => {
                self.models.lock().unwrap().push(model);
                Ok(out?)
            }
            Err(e) => Err(ApiError::internal(format!("sampling worker panicked: {e}"))),
        }
    }
}

fn check_session_id(id: &str) -> ApiResult<()> {
    let ok = !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_session_id",
            "session ids are 1-64 characters of [A-Za-z0-9_-]",
        ))
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()))
}

fn b64_rgb(img: &RgbImage) -> ApiResult<String> {
    Ok(png_base64(&DynamicImage::ImageRgb8(img.clone()))?)
}

fn b64_mask(m: &BinaryMask) -> ApiResult<String> {
    Ok(png_base64(&DynamicImage::ImageLuma8(m.to_image()))?)
}

fn decode_request_image(data: &str, size: u32) -> ApiResult<RgbImage> {
    let img = decode_base64_image(data)?.to_rgb8();
    Ok(if img.dimensions() == (size, size) {
        img
    } else {
        square_resize(&img, size)
    })
}

fn outside_mask_unchanged(before: &RgbImage, after: &RgbImage, mask: &BinaryMask) -> bool {
    before.dimensions() == after.dimensions()
        && before
            .enumerate_pixels()
            .all(|(x, y, p)| mask.get(x as usize, y as usize) || p == after.get_pixel(x, y))
}

fn view(state: &AppState, id: &str, s: &EditSession) -> ApiResult<SessionView> {
    let rounds = s
        .history
        .iter()
        .enumerate()
        .map(|(index, r)| {
            Ok(RoundView {
                index,
                caption: r.caption.clone(),
                guidance: r.guidance,
                result_image: b64_rgb(&r.result)?,
                mask: b64_mask(&r.mask)?,
                blended_image: b64_rgb(&r.blended)?,
                mask_area: r.mask.area(),
            })
        })
        .collect::<ApiResult<Vec<_>>>()?;
    Ok(SessionView {
        session_id: id.to_string(),
        checkpoint_hash: state.ckpt_hash.clone(),
        base_image: b64_rgb(&s.base_image)?,
        current_image: b64_rgb(&s.current)?,
        rounds,
    })
}

// ---------------------------------------------------------------------------

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        ckpt_hash: state.ckpt_hash.clone(),
        image_size: state.image_size as i64,
        workers: state.config.workers,
        queue_depth: state.config.queue_depth,
    })
}

async fn inpaint(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<InpaintResponse>> {
    let req: InpaintRequest = parse_json(&body)?;
    let prompt = req.prompt.trim().to_string();
    if prompt.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_prompt", "prompt must not be empty"));
    }
    let _ticket = state
        .try_admit()
        .ok_or_else(|| ApiError::new(StatusCode::TOO_MANY_REQUESTS, "queue_full", "request queue is full; retry later"))?;
    let t0 = Instant::now();
    let size = state.image_size;
    let request_image = req.image.as_deref().map(|d| decode_request_image(d, size)).transpose()?;

    let slot = match &req.session_id {
        None => None,
        Some(id) => match state.find_session(id)? {
            Some(slot) => Some(slot),
            None => {
                let base = request_image.clone().ok_or_else(|| {
                    ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`; send an image to start one"))
                })?;
                Some(state.create_session(id, base)?)
            }
        },
    };
    let source = match &slot {
        Some(slot) => {
            let current = slot.lock().await.session.current.clone();
            if request_image.as_ref().is_some_and(|img| img != &current) {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "stale_image",
                    "image differs from the session's current image",
                ));
            }
            current
        }
        None => request_image.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_image", "image is required without a session"))?,
    };

    let g = req.guidance.apply(&state.config.guidance);
    g.validate()?;
    let out = state.run_sample(source.clone(), prompt.clone(), g).await?;
    if !outside_mask_unchanged(&source, &out.blended, &out.mask) {
        return Err(ApiError::internal("blended image changed pixels outside its mask"));
    }
    let proposal_id = match &slot {
        Some(slot) => {
            let id = uuid::Uuid::new_v4().to_string();
            slot.lock().await.pending = Some(Proposal {
                id: id.clone(),
                caption: prompt,
                guidance: g,
                source_digest: shapefree::imaging::image_digest(&source),
                result: out.image.clone(),
                mask: out.mask.clone(),
            });
            Some(id)
        }
        None => None,
    };
    Ok(Json(InpaintResponse {
        result_image: b64_rgb(&out.image)?,
        mask: b64_mask(&out.mask)?,
        blended_image: b64_rgb(&out.blended)?,
        seed: out.seed,
        timing_ms: t0.elapsed().as_millis() as u64,
        guidance: g,
        session_id: req.session_id,
        proposal_id,
    }))
}

async fn apply(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<SessionView>> {
    let req: ApplyRequest = parse_json(&body)?;
    let slot = state
        .find_session(&id)?
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`")))?;
    // Held across the write so applies on one session run one at a time.
    let mut guard = slot.lock().await;
    let slot = &mut *guard;
    let fresh = slot.pending.as_ref().is_some_and(|p| {
        p.id == req.proposal_id && p.source_digest == shapefree::imaging::image_digest(&slot.session.current)
    });
    if !fresh {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "no_such_proposal",
            "proposal is unknown, already applied, or was made on an older image",
        ));
    }
    let p = slot.pending.take().unwrap();
    let mut next = slot.session.clone();
    next.commit(&p.caption, p.guidance, p.result, p.mask)?;
    next.save(&state.session_dir(&id), &id, Some(&state.ckpt_hash))?;
    slot.session = next;
    Ok(Json(view(&state, &id, &slot.session)?))
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let slot = state
        .find_session(&id)?
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`")))?;
    let s = slot.lock().await;
    Ok(Json(view(&state, &id, &s.session)?))
}

/// The stored `current.png`, byte for byte.
async fn current_png(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let slot = state
        .find_session(&id)?
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`")))?;
    let _s = slot.lock().await;
    let path = state.session_dir(&id).join("current.png");
    let bytes = std::fs::read(&path).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn cors(origins: &[String]) -> CorsLayer {
    let allow = if origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE])
}

pub fn router(state: Arc<AppState>) -> Router {
    let layer = cors(&state.config.cors_origins);
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/inpaint", post(inpaint))
        .route("/v1/session/{id}", get(get_session))
        .route("/v1/session/{id}/apply", post(apply))
        .route("/v1/session/{id}/current.png", get(current_png))
        .layer(layer)
        .with_state(state)
}

/// Bind address from `SHAPEFREE_BIND`, else the default.
pub fn bind_address() -> shapefree::Result<SocketAddr> {
    let raw = std::env::var(BIND_ENV).unwrap_or_else(|_| DEFAULT_BIND.to_string());
    raw.parse()
        .map_err(|e| Error::Config(format!("{BIND_ENV}=`{raw}` is not a socket address: {e}")))
}

pub async fn serve(state: AppState, addr: SocketAddr) -> shapefree::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::Io {
        path: Path::new(&addr.to_string()).to_path_buf(),
        source: e,
    })?;
    log::info!("listening on http://{addr} (checkpoint {})", state.ckpt_hash.chars().take(12).collect::<String>());
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Io {
            path: PathBuf::from(addr.to_string()),
            source: e,
        })
}
