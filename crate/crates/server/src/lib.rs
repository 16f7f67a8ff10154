//! Render service for trained scenes: a training-image catalog, one-shot
//! renders over HTTP and a latest-wins frame stream over WebSocket. The wire
//! format is described in [`protocol`].

pub mod protocol;
pub mod snapshot;
mod stream;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path as UrlPath, State, WebSocketUpgrade};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;
use wildsplat_core::trainer::TrainState;

use protocol::{Encoding, RenderRequest};
use snapshot::{encode, RenderedFrame, Snapshot, SnapshotStore, DEFAULT_CACHE_CAPACITY};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Request(String),
    #[error(transparent)]
    Core(#[from] wildsplat_core::Error),
    #[error("encoding failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error("render worker failed: {0}")]
    Worker(String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::Request(_) => StatusCode::BAD_REQUEST,
            ServiceError::Core(wildsplat_core::Error::Argument(_))
            | ServiceError::Core(wildsplat_core::Error::Dimension(_))
            | ServiceError::Core(wildsplat_core::Error::NonFinite(_)) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub cache_capacity: usize,
    /// Concurrent render jobs.
    pub workers: usize,
    /// Directory served at `/` (the viewer bundle), if any.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            static_dir: None,
        }
    }
}

pub struct Service {
    pub store: SnapshotStore,
    pub config: ServiceConfig,
    pool: Semaphore,
}

impl Service {
    pub fn new(snapshot: Snapshot, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            store: SnapshotStore::new(snapshot),
            pool: Semaphore::new(config.workers.max(1)),
            config,
        })
    }

    pub fn from_state(state: &TrainState, config: ServiceConfig) -> Arc<Self> {
        Self::new(Snapshot::from_state(state, 1, config.cache_capacity), config)
    }

    pub fn from_checkpoint(dir: &Path, config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        let state = TrainState::load(dir)?;
        Ok(Self::from_state(&state, config))
    }

    /// Renders on the blocking pool from the snapshot current at call time.
    pub async fn render(&self, req: RenderRequest) -> Result<RenderedFrame, ServiceError> {
        let _permit = self.pool.acquire().await.map_err(|e| ServiceError::Worker(e.to_string()))?;
        let snapshot = self.store.current();
        tokio::task::spawn_blocking(move || snapshot.render_once(&req))
            .await
            .map_err(|e| ServiceError::Worker(e.to_string()))?
    }
}

pub fn router(service: Arc<Service>) -> Router {
    let api = Router::new()
        .route("/api/scene", get(scene_info))
        .route("/api/thumb/{j}", get(thumbnail))
        .route("/api/render", post(render))
        .route("/ws", get(websocket));
    let api = match &service.config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.with_state(service)
}

/// Binds `addr` and serves until the task is dropped.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}

async fn scene_info(State(service): State<Arc<Service>>) -> impl IntoResponse {
    Json(service.store.current().info())
}

async fn thumbnail(State(service): State<Arc<Service>>, UrlPath(j): UrlPath<usize>) -> Result<Response, ServiceError> {
    let snapshot = service.store.current();
    let entry = snapshot
        .catalog
        .get(j)
        .ok_or_else(|| ServiceError::Request(format!("no training image {j}")))?;
    let bytes = encode(&entry.thumbnail, Encoding::Png)?;
    Ok(([(header::CONTENT_TYPE, Encoding::Png.mime())], bytes).into_response())
}

async fn render(State(service): State<Arc<Service>>, Json(req): Json<RenderRequest>) -> Result<Response, ServiceError> {
    let frame = service.render(req).await?;
    let mut resp = Response::new(Body::from(frame.bytes));
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static(frame.encoding.mime()));
    h.insert("X-Render-Millis", HeaderValue::from_str(&format!("{:.3}", frame.total_ms)).expect("ascii"));
    h.insert("X-Cache-Hit", HeaderValue::from_static(if frame.cache_hit { "true" } else { "false" }));
    h.insert("X-Scene-Version", HeaderValue::from(frame.version));
    Ok(resp)
}

async fn websocket(State(service): State<Arc<Service>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream::run(service, socket))
}
