//! HTTP inference service.
//!
//! | route | body | reply |
//! |---|---|---|
//! | `GET /health` | | `{"status":"ok"}` |
//! | `GET /model` | | config and variant summary |
//! | `POST /segment` | [`SegmentRequest`] | [`SegmentResponse`] |
//! | `POST /auto_prompt` | [`AutoPromptRequest`] | [`AutoPromptResponse`] |
//!
//! Anything else is served from the static directory when one is given.
//! Errors carry `{"error": "..."}` with 400 for malformed JSON, 413 for
//! oversized bodies or images and 422 for undecodable images or invalid
//! prompts.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use promise_core::autodiff::ParamStore;
use promise_core::data::{PointPrompt, PromptSetting};
use promise_core::model::ModelConfig;
use promise_core::pattern::IpsVariant;
use promise_core::train::{Prompts, Segmenter};

use crate::checkpoint::Checkpoint;
use crate::dataset::{decode_rgb, encode_mask_png};
use crate::error::{AppError, Result};

/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 8 << 20;
/// Largest accepted image side in pixels.
pub const MAX_IMAGE_SIDE: usize = 2048;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image_b64: String,
    #[serde(default)]
    pub points: Vec<PointPrompt>,
    #[serde(default)]
    pub use_ips: bool,
    /// Used to auto-prompt when `points` is empty.
    #[serde(default)]
    pub setting: Option<PromptSetting>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask_b64: String,
    pub iou_pred: f32,
    pub timing_ms: f64,
    pub points: Vec<PointPrompt>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AutoPromptRequest {
    pub image_b64: String,
    #[serde(default)]
    pub setting: Option<PromptSetting>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AutoPromptResponse {
    pub points: Vec<PointPrompt>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApmSummary {
    pub variant: String,
    pub setting: PromptSetting,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: ModelConfig,
    pub ips_variant: IpsVariant,
    pub apm: Option<ApmSummary>,
    pub frozen_hash: String,
    pub num_tensors: usize,
    pub adapted_params: usize,
}

/// Loaded checkpoint shared read-only by every request.
pub struct Service {
    store: ParamStore<f32>,
    seg: Segmenter,
    summary: ModelSummary,
}

impl Service {
    pub fn new(ckpt: Checkpoint) -> Result<Self> {
        let Checkpoint { config, mut store } = ckpt;
        let seg = Segmenter::bind(&mut store, &config)?;
        let summary = ModelSummary {
            config,
            ips_variant: seg.shift.variant,
            apm: seg.apm.as_ref().map(|a| ApmSummary {
                variant: a.variant.name().into(),
                setting: a.setting,
            }),
            frozen_hash: hex::encode(store.frozen_hash()),
            num_tensors: store.len(),
            adapted_params: store.iter().filter(|(_, _, t)| !t.is_frozen()).map(|(_, _, t)| t.numel()).sum(),
        };
        Ok(Self { store, seg, summary })
    }

    pub fn summary(&self) -> &ModelSummary {
        &self.summary
    }

    /// Decode an image, resize it to the model's input and return it with
    /// the original size.
    fn load_image(&self, b64: &str) -> std::result::Result<(Vec<f32>, usize, usize), ApiError> {
        let bytes = B64
            .decode(b64.trim())
            .map_err(|e| ApiError::unprocessable(format!("image_b64 is not base64: {e}")))?;
        let (w, h, px) = decode_rgb(&bytes).map_err(|e| ApiError::unprocessable(e.to_string()))?;
        if w > MAX_IMAGE_SIDE || h > MAX_IMAGE_SIDE {
            return Err(ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                format!("image is {w}x{h}, limit is {MAX_IMAGE_SIDE} per side"),
            ));
        }
        let s = self.summary.config.image_size;
        let px = if (w, h) == (s, s) {
            px
        } else {
            let img = RgbImage::from_raw(w as u32, h as u32, px).expect("decoded buffer matches its size");
            imageops::resize(&img, s as u32, s as u32, FilterType::Triangle).into_raw()
        };
        Ok((px.iter().map(|&v| v as f32 / 255.0).collect(), w, h))
    }

    fn auto_points(&self, image: &[f32], setting: Option<PromptSetting>) -> std::result::Result<Vec<PointPrompt>, ApiError> {
        let apm = self
            .seg
            .apm
            .as_ref()
            .ok_or_else(|| ApiError::unprocessable("checkpoint has no auto-prompting head".into()))?;
        let emb = self.seg.model.encode_image(&self.store, image).map_err(ApiError::core)?;
        self.seg
            .auto_points(&self.store, &emb, setting.unwrap_or(apm.setting))
            .map_err(ApiError::core)
    }

    pub fn segment(&self, req: &SegmentRequest) -> std::result::Result<SegmentResponse, ApiError> {
        let start = Instant::now();
        let (image, w, h) = self.load_image(&req.image_b64)?;
        let points = if req.points.is_empty() {
            self.auto_points(&image, req.setting)?
        } else {
            req.points.clone()
        };
        let pred = self
            .seg
            .predict(&self.store, &image, Prompts::Points(&points), req.use_ips)
            .map_err(ApiError::core)?;
        let s = self.summary.config.image_size;
        let bin: Vec<u8> = pred.probs.iter().map(|&p| if p >= 0.5 { 255 } else { 0 }).collect();
        let mask = if (w, h) == (s, s) {
            bin
        } else {
            let img = GrayImage::from_raw(s as u32, s as u32, bin).expect("mask matches model size");
            imageops::resize(&img, w as u32, h as u32, FilterType::Nearest).into_raw()
        };
        let png = encode_mask_png(w, h, &mask).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(SegmentResponse {
            mask_b64: B64.encode(png),
            iou_pred: pred.iou_pred,
            timing_ms: start.elapsed().as_secs_f64() * 1e3,
            points,
        })
    }

    pub fn auto_prompt(&self, req: &AutoPromptRequest) -> std::result::Result<AutoPromptResponse, ApiError> {
        let (image, _, _) = self.load_image(&req.image_b64)?;
        Ok(AutoPromptResponse {
            points: self.auto_points(&image, req.setting)?,
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: String) -> Self {
        Self { status, message }
    }

    fn unprocessable(message: String) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(message: String) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }

    fn core(e: promise_core::Error) -> Self {
        use promise_core::Error as E;
        match e {
            E::Prompt(_) | E::Input(_) | E::Config(_) | E::InsufficientPixels { .. } => {
                Self::unprocessable(e.to_string())
            }
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

async fn blocking<R: Send + 'static>(
    f: impl FnOnce() -> std::result::Result<R, ApiError> + Send + 'static,
) -> std::result::Result<R, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn model(State(svc): State<Arc<Service>>) -> Json<ModelSummary> {
    Json(svc.summary.clone())
}

async fn segment(State(svc): State<Arc<Service>>, body: Bytes) -> std::result::Result<Json<SegmentResponse>, ApiError> {
    let req: SegmentRequest = parse(&body)?;
    blocking(move || svc.segment(&req)).await.map(Json)
}

async fn auto_prompt(
    State(svc): State<Arc<Service>>,
    body: Bytes,
) -> std::result::Result<Json<AutoPromptResponse>, ApiError> {
    let req: AutoPromptRequest = parse(&body)?;
    blocking(move || svc.auto_prompt(&req)).await.map(Json)
}

pub fn router(svc: Arc<Service>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/model", get(model))
        .route("/segment", post(segment))
        .route("/auto_prompt", post(auto_prompt))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until interrupted.
pub async fn serve(ckpt: Checkpoint, addr: SocketAddr, static_dir: Option<PathBuf>) -> Result<()> {
    if let Some(dir) = static_dir.as_ref().filter(|d| !d.is_dir()) {
        return Err(AppError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "static directory not found"),
        ));
    }
    let app = router(Arc::new(Service::new(ckpt)?), static_dir);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| AppError::Io { path: addr.to_string(), source: e })?;
    let local = listener.local_addr().map_err(|e| AppError::Io { path: addr.to_string(), source: e })?;
    eprintln!("listening on http://{local}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| AppError::Io { path: local.to_string(), source: e })
}
