//! REST front end for trained stamp models.
//!
//! Images travel as base64-encoded PNG inside JSON bodies. All inference
//! runs on one blocking lane per device behind a bounded queue.

pub mod error;
pub mod registry;
pub mod sessions;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use candle_core::Device;
use serde::{Deserialize, Serialize};
use stampgen::dataset::mix_seed;
use stampgen::domain::rasterize_bbox;
use stampgen::imageio::{from_base64, image_from_bytes, image_to_png, mask_from_bytes, mask_to_png, resize_mask_nearest, to_base64};
use stampgen::pipeline::{alpha_grid, sample_latent, InterpolationAxis};
use stampgen::{ImageTensor, LatentVector, StampModel, StampResult};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

pub use error::ApiError;
use registry::{Incompatible, ModelInfo, Registry, SlotState, SlotStatus};
use sessions::{content_hash, SessionRecord, SessionStore};

pub const MAX_FRAMES: usize = 64;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub model_dir: PathBuf,
    pub port: u16,
    pub device: String,
    /// Requests admitted at once, waiting or running; more get 429.
    pub queue_capacity: usize,
    pub static_dir: Option<PathBuf>,
    pub session_store: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            model_dir: PathBuf::from("models"),
            port: 8080,
            device: "cpu".into(),
            queue_capacity: 16,
            static_dir: None,
            session_store: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unsupported device {0:?} (available: cpu)")]
    Device(String),
    #[error("bad value for {name}: {value:?}")]
    Env { name: &'static str, value: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceConfig {
    /// Reads MODEL_DIR, PORT, DEVICE, QUEUE_CAPACITY, STATIC_DIR and
    /// SESSION_STORE, falling back to the defaults.
    pub fn from_env() -> Result<Self, ServiceError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let mut cfg = Self::default();
        if let Some(v) = var("MODEL_DIR") {
            cfg.model_dir = v.into();
        }
        if let Some(v) = var("PORT") {
            cfg.port = v.parse().map_err(|_| ServiceError::Env { name: "PORT", value: v })?;
        }
        if let Some(v) = var("DEVICE") {
            cfg.device = v;
        }
        if let Some(v) = var("QUEUE_CAPACITY") {
            cfg.queue_capacity = v.parse().map_err(|_| ServiceError::Env { name: "QUEUE_CAPACITY", value: v })?;
        }
        cfg.static_dir = var("STATIC_DIR").map(PathBuf::from);
        cfg.session_store = var("SESSION_STORE").map(PathBuf::from);
        Ok(cfg)
    }
}

fn parse_device(name: &str) -> Result<Device, ServiceError> {
    match name.to_ascii_lowercase().as_str() {
        "cpu" => Ok(Device::Cpu),
        _ => Err(ServiceError::Device(name.to_string())),
    }
}

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub sessions: Option<Arc<SessionStore>>,
    device: Device,
    queue: Arc<Semaphore>,
    lane: Arc<Mutex<()>>,
    static_dir: Option<PathBuf>,
}

/// Held for as long as a request occupies the queue.
pub struct QueueTicket(#[allow(dead_code)] OwnedSemaphorePermit);

impl AppState {
    /// Scans the model directory. Models stay in the loading state until
    /// [`AppState::load_models`] or [`AppState::spawn_loading`] runs.
    pub fn new(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let device = parse_device(&config.device)?;
        let registry = Arc::new(Registry::scan(&config.model_dir)?);
        for bad in &registry.incompatible {
            log::warn!("ignoring {}: {}", bad.file, bad.reason);
        }
        let sessions = config.session_store.as_deref().map(SessionStore::open).transpose()?.map(Arc::new);
        Ok(Self {
            registry,
            sessions,
            device,
            queue: Arc::new(Semaphore::new(config.queue_capacity)),
            lane: Arc::new(Mutex::new(())),
            static_dir: config.static_dir.clone(),
        })
    }

    pub fn load_models(&self) {
        self.registry.load_all(&self.device);
    }

    pub fn spawn_loading(&self) -> std::thread::JoinHandle<()> {
        let state = self.clone();
        std::thread::spawn(move || state.load_models())
    }

    /// Claims a queue place, or `None` when the queue is full.
    pub fn try_enqueue(&self) -> Option<QueueTicket> {
        self.queue.clone().try_acquire_owned().ok().map(QueueTicket)
    }

    fn model(&self, class: &str) -> Result<Arc<StampModel>, ApiError> {
        let slot = self.registry.slots.get(class).ok_or_else(|| ApiError::UnknownModel(class.to_string()))?;
        let state = slot.state.read().expect("slot lock");
        match &*state {
            SlotState::Loading => Err(ApiError::Loading(class.to_string())),
            SlotState::Ready(m) => Ok(m.clone()),
            SlotState::Failed(e) => Err(ApiError::Internal(format!("model {class:?} failed to load: {e}"))),
        }
    }

    /// Runs `f` on the inference lane.
    async fn run<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    {
        let ticket = self.try_enqueue().ok_or(ApiError::QueueFull)?;
        let lane = self.lane.clone();
        let out = tokio::task::spawn_blocking(move || {
            let _guard = lane.lock().unwrap_or_else(|p| p.into_inner());
            f()
        })
        .await
        .map_err(|e| ApiError::Internal(format!("inference task: {e}")))?;
        drop(ticket);
        out
    }

    fn remember(&self, endpoint: &str, request: &impl Serialize, images: &[(&str, &str)]) -> Result<Option<String>, ApiError> {
        let Some(store) = &self.sessions else { return Ok(None) };
        let results = images.iter().map(|(k, v)| (k.to_string(), content_hash(v.as_bytes()))).collect();
        let request = serde_json::to_value(request).map_err(|e| ApiError::Internal(e.to_string()))?;
        store.record(endpoint, request, results).map(Some).map_err(|e| ApiError::Internal(format!("session store: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampRequest {
    pub model: String,
    /// Base64 PNG or JPEG; resized to the model resolution.
    pub background: String,
    /// Normalized `[x1, y1, x2, y2]`.
    pub bbox: Vec<f32>,
    #[serde(default)]
    pub z_mask: Option<Vec<f32>>,
    #[serde(default)]
    pub z_texture: Option<Vec<f32>>,
    /// Source of any omitted latents and of the noise seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub z_mask: Option<Vec<f32>>,
    pub z_texture: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampResponse {
    pub mask: String,
    pub texture: String,
    pub composite: String,
    pub latents: Latents,
    pub noise_seed: u64,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetextureRequest {
    pub model: String,
    pub background: String,
    /// Base64 PNG with the same pixel size as the background.
    pub mask: String,
    #[serde(default)]
    pub z_texture: Option<Vec<f32>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetextureResponse {
    pub texture: String,
    pub composite: String,
    pub latents: Latents,
    pub noise_seed: u64,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolateRequest {
    pub model: String,
    pub background: String,
    pub bbox: Vec<f32>,
    /// `mask` or `texture`: the latent that varies.
    pub axis: String,
    pub frames: usize,
    pub start: Vec<f32>,
    pub end: Vec<f32>,
    /// The latent held constant on the other axis.
    pub fixed: Vec<f32>,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub alpha: f32,
    pub mask: String,
    pub texture: String,
    pub composite: String,
    pub latents: Latents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolateResponse {
    pub frames: Vec<Frame>,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct ListedModel {
    #[serde(flatten)]
    pub info: ModelInfo,
    pub status: SlotStatus,
}

#[derive(Debug, Serialize)]
pub struct ModelsResponse {
    pub models: Vec<ListedModel>,
    pub incompatible: Vec<Incompatible>,
}

fn unprocessable(msg: impl Into<String>) -> ApiError {
    ApiError::Unprocessable(msg.into())
}

fn bbox_array(v: &[f32], size: usize) -> Result<[f32; 4], ApiError> {
    let b: [f32; 4] = v.try_into().map_err(|_| unprocessable(format!("bbox needs 4 numbers, got {}", v.len())))?;
    rasterize_bbox(b, size, size)?;
    Ok(b)
}

fn latent(v: Option<&Vec<f32>>, dim: usize, seed: u64, what: &str) -> Result<LatentVector, ApiError> {
    match v {
        None => Ok(sample_latent(dim, seed)),
        Some(v) if v.len() != dim => Err(unprocessable(format!("{what} has {} dims, model expects {dim}", v.len()))),
        Some(v) => Ok(LatentVector::new(v.clone())?),
    }
}

fn decode_image(b64: &str, size: Option<usize>) -> Result<ImageTensor, ApiError> {
    Ok(image_from_bytes(&from_base64(b64)?, size)?)
}

fn png64(img: &ImageTensor) -> Result<String, ApiError> {
    Ok(to_base64(&image_to_png(img)?))
}

fn encode_result(r: &StampResult) -> Result<(String, String, String), ApiError> {
    Ok((to_base64(&mask_to_png(&r.mask)?), png64(&r.texture)?, png64(&r.composite)?))
}

/// Fills in omitted latents and seeds so that the request replays exactly.
fn resolve_stamp(req: &StampRequest, model: &StampModel) -> Result<(StampRequest, [f32; 4], LatentVector, LatentVector), ApiError> {
    let bbox = bbox_array(&req.bbox, model.size())?;
    let seed = req.seed.unwrap_or_else(rand::random);
    let zm = latent(req.z_mask.as_ref(), model.mask_z_dim(), mix_seed(seed, &[1]), "z_mask")?;
    let zt = latent(req.z_texture.as_ref(), model.texture_z_dim(), mix_seed(seed, &[2]), "z_texture")?;
    let resolved = StampRequest {
        model: req.model.clone(),
        background: req.background.clone(),
        bbox: bbox.to_vec(),
        z_mask: Some(zm.values().to_vec()),
        z_texture: Some(zt.values().to_vec()),
        seed: None,
        noise_seed: Some(req.noise_seed.unwrap_or_else(|| mix_seed(seed, &[3]))),
    };
    Ok((resolved, bbox, zm, zt))
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    let ready = state.registry.slots.values().filter(|s| matches!(s.status(), SlotStatus::Ready)).count();
    Json(serde_json::json!({ "status": "ok", "models": state.registry.slots.len(), "ready": ready }))
}

async fn list_models(State(state): State<AppState>) -> Json<ModelsResponse> {
    let models = state
        .registry
        .slots
        .values()
        .map(|s| ListedModel { info: s.info.clone(), status: s.status() })
        .collect();
    Json(ModelsResponse { models, incompatible: state.registry.incompatible.clone() })
}

async fn stamp(State(state): State<AppState>, Json(req): Json<StampRequest>) -> Result<Json<StampResponse>, ApiError> {
    let model = state.model(&req.model)?;
    let (resolved, bbox, zm, zt) = resolve_stamp(&req, &model)?;
    let noise_seed = resolved.noise_seed.expect("resolved");
    let bg = resolved.background.clone();
    let result = state
        .run(move || {
            let background = decode_image(&bg, Some(model.size()))?;
            let r = model.stamp(&background, bbox, &zm, &zt, noise_seed)?;
            encode_result(&r)
        })
        .await?;
    let (mask, texture, composite) = result;
    let session_id = state.remember("stamp", &resolved, &[("mask", &mask), ("texture", &texture), ("composite", &composite)])?;
    Ok(Json(StampResponse {
        mask,
        texture,
        composite,
        latents: Latents { z_mask: resolved.z_mask, z_texture: resolved.z_texture.expect("resolved") },
        noise_seed,
        session_id,
    }))
}

async fn retexture(State(state): State<AppState>, Json(req): Json<RetextureRequest>) -> Result<Json<RetextureResponse>, ApiError> {
    let model = state.model(&req.model)?;
    let seed = req.seed.unwrap_or_else(rand::random);
    let zt = latent(req.z_texture.as_ref(), model.texture_z_dim(), mix_seed(seed, &[2]), "z_texture")?;
    let noise_seed = req.noise_seed.unwrap_or_else(|| mix_seed(seed, &[3]));
    let resolved = RetextureRequest { z_texture: Some(zt.values().to_vec()), seed: None, noise_seed: Some(noise_seed), ..req };
    let (bg, mk) = (resolved.background.clone(), resolved.mask.clone());
    let (texture, composite) = state
        .run(move || {
            let native = decode_image(&bg, None)?;
            let mask = mask_from_bytes(&from_base64(&mk)?, None)?;
            if (mask.height(), mask.width()) != (native.height(), native.width()) {
                return Err(unprocessable(format!(
                    "mask is {}x{} but the image is {}x{}",
                    mask.height(),
                    mask.width(),
                    native.height(),
                    native.width()
                )));
            }
            if mask.count_nonzero() == 0 {
                return Err(ApiError::from(stampgen::StampError::EmptyMask));
            }
            let s = model.size();
            let background = decode_image(&bg, Some(s))?;
            let r = model.retexture(&background, &resize_mask_nearest(&mask, s, s)?, &zt, noise_seed)?;
            Ok((png64(&r.texture)?, png64(&r.composite)?))
        })
        .await?;
    let session_id = state.remember("retexture", &resolved, &[("texture", &texture), ("composite", &composite)])?;
    Ok(Json(RetextureResponse {
        texture,
        composite,
        latents: Latents { z_mask: None, z_texture: resolved.z_texture.expect("resolved") },
        noise_seed,
        session_id,
    }))
}

async fn interpolate(State(state): State<AppState>, Json(req): Json<InterpolateRequest>) -> Result<Json<InterpolateResponse>, ApiError> {
    let axis: InterpolationAxis = req.axis.parse()?;
    let model = state.model(&req.model)?;
    if req.frames > MAX_FRAMES {
        return Err(unprocessable(format!("at most {MAX_FRAMES} frames")));
    }
    let alphas = alpha_grid(req.frames)?;
    let bbox = bbox_array(&req.bbox, model.size())?;
    let (moving, fixed_dim) = match axis {
        InterpolationAxis::Mask => (model.mask_z_dim(), model.texture_z_dim()),
        InterpolationAxis::Texture => (model.texture_z_dim(), model.mask_z_dim()),
    };
    let a = latent(Some(&req.start), moving, 0, "start")?;
    let b = latent(Some(&req.end), moving, 0, "end")?;
    let fixed = latent(Some(&req.fixed), fixed_dim, 0, "fixed")?;
    let (bg, noise_seed) = (req.background.clone(), req.noise_seed);
    let frames = state
        .run(move || {
            let background = decode_image(&bg, Some(model.size()))?;
            let results = model.interpolate(&background, bbox, axis, &a, &b, &fixed, alphas.len(), noise_seed)?;
            results
                .iter()
                .zip(alphas)
                .map(|(r, alpha)| {
                    let (mask, texture, composite) = encode_result(r)?;
                    let latents = Latents { z_mask: Some(r.z_mask.values().to_vec()), z_texture: r.z_texture.values().to_vec() };
                    Ok(Frame { alpha, mask, texture, composite, latents })
                })
                .collect::<Result<Vec<_>, ApiError>>()
        })
        .await?;
    let hashes: Vec<(String, String)> = frames.iter().enumerate().map(|(k, f)| (format!("composite.{k}"), f.composite.clone())).collect();
    let refs: Vec<(&str, &str)> = hashes.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let session_id = state.remember("interpolate", &req, &refs)?;
    Ok(Json(InterpolateResponse { frames, session_id }))
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionRecord>, ApiError> {
    let store = state.sessions.as_ref().ok_or_else(|| ApiError::NotFound("session store".into()))?;
    store.get(&id).map(Json).ok_or_else(|| ApiError::NotFound(format!("session {id}")))
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.static_dir.clone();
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/models", get(list_models))
        .route("/v1/stamp", post(stamp))
        .route("/v1/retexture", post(retexture))
        .route("/v1/interpolate", post(interpolate))
        .route("/v1/sessions/{id}", get(get_session))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Binds, starts loading models in the background and serves until the
/// process receives Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::new(&config)?;
    state.spawn_loading();
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {addr}, models from {}", config.model_dir.display());
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
