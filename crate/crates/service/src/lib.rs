//! HTTP/JSON service for running adaptive sessions with human participants.
//!
//! Routes (all JSON):
//! - `POST /sessions` creates a session from `{config, labels?}`.
//! - `POST /sessions/import` resumes an exported document `{document, labels?}`.
//! - `GET /sessions` lists live sessions.
//! - `GET /sessions/{id}/next` returns the pending query.
//! - `POST /sessions/{id}/responses` records `{stimulus, response}`; a stimulus
//!   that does not match the pending query is rejected with 409.
//! - `GET /sessions/{id}/status`, `GET /sessions/{id}/slice`,
//!   `GET /sessions/{id}/export`, `POST /sessions/{id}/finish`.
//!
//! Any other path is served from the static asset directory when configured.

pub mod api;
pub mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;

use axum::routing::{get, post};
use axum::Router;
use tower_http::services::{ServeDir, ServeFile};

pub use api::AppState;
pub use error::ApiError;
pub use store::{DimensionLabel, Store, StoredSession};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_DATA_DIR: &str = "nest-data";

/// Where the service listens and keeps its files.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub port: u16,
    pub data_dir: PathBuf,
    /// Directory with the built console assets; `index.html` is the fallback page.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: DEFAULT_PORT,
            data_dir: PathBuf::from(DEFAULT_DATA_DIR),
            static_dir: None,
        }
    }
}

impl ServiceConfig {
    /// Defaults overridden by `NEST_PORT`, `NEST_DATA_DIR` and `NEST_STATIC_DIR`.
    pub fn from_env() -> Result<Self, ApiError> {
        let mut cfg = Self::default();
        if let Ok(p) = std::env::var("NEST_PORT") {
            cfg.port = p
                .parse()
                .map_err(|_| ApiError::bad_request(format!("NEST_PORT '{p}' is not a port number")))?;
        }
        if let Ok(d) = std::env::var("NEST_DATA_DIR") {
            cfg.data_dir = PathBuf::from(d);
        }
        if let Ok(d) = std::env::var("NEST_STATIC_DIR") {
            cfg.static_dir = Some(PathBuf::from(d));
        }
        Ok(cfg)
    }
}

/// The API routes plus optional static file serving.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(api::create_session).get(api::list_sessions))
        .route("/sessions/import", post(api::import_session))
        .route("/sessions/{id}/next", get(api::get_next))
        .route("/sessions/{id}/responses", post(api::post_response))
        .route("/sessions/{id}/status", get(api::get_status))
        .route("/sessions/{id}/slice", get(api::get_slice))
        .route("/sessions/{id}/export", get(api::export_session))
        .route("/sessions/{id}/finish", post(api::finish_session))
        .with_state(state);
    match static_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            api.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => api,
    }
}

/// Loads persisted sessions and serves until the process is interrupted.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ApiError> {
    let store = Store::open(&cfg.data_dir)?;
    let state = AppState::new(Some(store))?;
    let app = router(state, cfg.static_dir.clone());
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ApiError::Internal(format!("bind {addr}: {e}")))?;
    tracing::info!(%addr, data_dir = %cfg.data_dir.display(), "serving");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))
}
