use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Multipart, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use lumisr_core::env::EnvMap;
use lumisr_core::io::{decode_pfm, encode_png_bytes};
use serde_json::json;

use crate::context::{Method, RelightContext, RenderRequest, RequestError};

/// Rendered frames kept for repeated requests.
pub const FRAME_CACHE_SIZE: usize = 256;

pub const RENDER_MILLIS: &str = "x-render-millis";
pub const RESOLVED_REQUEST: &str = "x-resolved-request";
pub const CACHE_STATUS: &str = "x-cache";

pub struct AppState {
    pub ctx: RelightContext,
    frames: Mutex<LruCache<String, Bytes>>,
}

impl AppState {
    pub fn new(ctx: RelightContext) -> Arc<Self> {
        Arc::new(Self {
            ctx,
            frames: Mutex::new(LruCache::new(NonZeroUsize::new(FRAME_CACHE_SIZE).expect("nonzero"))),
        })
    }

    pub fn cached_frames(&self) -> usize {
        self.frames.lock().map(|c| c.len()).unwrap_or(0)
    }
}

impl IntoResponse for RequestError {
    fn into_response(self) -> Response {
        let status = match &self {
            RequestError::Malformed(_) => StatusCode::BAD_REQUEST,
            RequestError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            RequestError::Render(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/info", get(info))
        .route("/lights", get(lights))
        .route("/render", post(render))
        .route("/render_env", post(render_env))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

async fn info(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let ctx = &state.ctx;
    let scan = ctx.scan();
    Json(json!({
        "scan": scan.meta.name,
        "n_lights": scan.stage().n(),
        "resolution": [scan.width(), scan.height()],
        "methods": ctx.methods().iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        "model_config": ctx.params().map(|p| &p.config),
        "default_sharpness": ctx.default_sharpness(),
    }))
}

async fn lights(State(state): State<Arc<AppState>>) -> Json<Vec<[f64; 3]>> {
    Json(state.ctx.scan().stage().lights().iter().map(|l| [l.x, l.y, l.z]).collect())
}

fn png_response(png: Bytes, millis: f64, resolved: Option<&str>, cache: Option<&str>) -> Response {
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    let mut put = |name: &'static str, value: String| {
        if let Ok(v) = HeaderValue::from_str(&value) {
            headers.insert(HeaderName::from_static(name), v);
        }
    };
    put(RENDER_MILLIS, format!("{millis:.3}"));
    if let Some(r) = resolved {
        put(RESOLVED_REQUEST, r.to_string());
    }
    if let Some(c) = cache {
        put(CACHE_STATUS, c.to_string());
    }
    (StatusCode::OK, headers, png).into_response()
}

async fn render(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, RequestError> {
    let start = Instant::now();
    let req: RenderRequest = serde_json::from_slice(&body).map_err(|e| RequestError::Malformed(format!("bad request body: {e}")))?;
    let resolved = state.ctx.resolve(&req)?;
    let key = resolved.key();
    let hit = state.frames.lock().ok().and_then(|mut c| c.get(&key).cloned());
    if let Some(png) = hit {
        return Ok(png_response(png, elapsed_ms(start), Some(&key), Some("hit")));
    }
    let worker = Arc::clone(&state);
    let r = resolved.clone();
    let png = tokio::task::spawn_blocking(move || worker.ctx.render_png(&r))
        .await
        .map_err(|e| RequestError::Render(format!("render task failed: {e}")))??;
    let png = Bytes::from(png);
    if let Ok(mut c) = state.frames.lock() {
        c.put(key.clone(), png.clone());
    }
    Ok(png_response(png, elapsed_ms(start), Some(&key), Some("miss")))
}

async fn render_env(State(state): State<Arc<AppState>>, mut form: Multipart) -> Result<Response, RequestError> {
    let start = Instant::now();
    let mut env_bytes = None;
    let mut method = None;
    let mut exposure = 1.0f64;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| RequestError::Malformed(format!("bad multipart body: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let data = field
            .bytes()
            .await
            .map_err(|e| RequestError::Malformed(format!("bad multipart field `{name}`: {e}")))?;
        let text = || String::from_utf8(data.to_vec()).map_err(|_| RequestError::Malformed(format!("field `{name}` is not UTF-8")));
        match name.as_str() {
            "env" => env_bytes = Some(data.clone()),
            "method" => method = Some(text()?.trim().parse::<Method>()?),
            "exposure" => {
                exposure = text()?
                    .trim()
                    .parse()
                    .map_err(|_| RequestError::Malformed("exposure is not a number".into()))?;
                if !(exposure.is_finite() && exposure >= 0.0) {
                    return Err(RequestError::Invalid(format!("exposure {exposure} must be >= 0")));
                }
            }
            other => return Err(RequestError::Malformed(format!("unexpected field `{other}`"))),
        }
    }
    let env_bytes = env_bytes.ok_or_else(|| RequestError::Malformed("missing `env` field".into()))?;
    let image = decode_pfm(&env_bytes).map_err(|e| RequestError::Malformed(format!("env map: {e}")))?;
    let env = EnvMap::from_image(image).map_err(|e| RequestError::Invalid(format!("env map: {e}")))?;
    let method = method.unwrap_or(if state.ctx.params().is_some() { Method::Neural } else { Method::Linear });
    let worker = Arc::clone(&state);
    let img = tokio::task::spawn_blocking(move || worker.ctx.render_env(method, &env))
        .await
        .map_err(|e| RequestError::Render(format!("render task failed: {e}")))??;
    let png = encode_png_bytes(&img, exposure as f32)?;
    Ok(png_response(Bytes::from(png), elapsed_ms(start), None, None))
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
