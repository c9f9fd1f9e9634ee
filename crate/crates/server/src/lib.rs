//! HTTP API exposing each interactive step of a comparison run: upload,
//! crop, segment, register, confirm, analyse, then fetch maps and movies.
//!
//! Sessions live in memory; each has a directory under the session root
//! holding its outputs and a `session.json`. Analysed sessions found there
//! at start-up are served again read-only.

pub mod error;
pub mod payload;
pub mod routes;
pub mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::http::HeaderValue;
use axum::Router;
use thiserror::Error;
use tokio::net::TcpListener;
use tower_http::cors::{Any, CorsLayer};

pub use error::ApiError;
pub use payload::FramePayload;
pub use session::{SessionState, SessionStore};

pub const PORT_ENV: &str = "SEQMAP_PORT";
pub const SESSION_DIR_ENV: &str = "SEQMAP_SESSION_DIR";
pub const UI_ORIGIN_ENV: &str = "SEQMAP_UI_ORIGIN";
pub const DEFAULT_PORT: u16 = 8377;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Serve(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// One subdirectory per session.
    pub session_dir: PathBuf,
    /// Write `session.json` files and restore analysed sessions at start-up.
    pub persist: bool,
    /// Built UI assets served on non-API routes; `None` answers them 404.
    pub ui_dir: Option<PathBuf>,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl ServerConfig {
    /// Reads the session directory and UI origin from the environment.
    /// Without a session directory, sessions go to a scratch directory and
    /// are not persisted.
    pub fn from_env() -> Self {
        let dir = std::env::var_os(SESSION_DIR_ENV).map(PathBuf::from);
        Self {
            persist: dir.is_some(),
            session_dir: dir.unwrap_or_else(|| std::env::temp_dir().join(format!("seqmap-sessions-{}", std::process::id()))),
            ui_dir: None,
            cors_origin: std::env::var(UI_ORIGIN_ENV).ok(),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub config: Arc<ServerConfig>,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Self {
        let store = SessionStore::default();
        if config.persist {
            let n = store.restore_from(&config.session_dir);
            if n > 0 {
                log::info!("restored {n} analysed session(s) from {}", config.session_dir.display());
            }
        }
        Self {
            store: Arc::new(store),
            config: Arc::new(config),
        }
    }
}

fn cors(origin: Option<&str>) -> CorsLayer {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    match origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => layer.allow_origin(o),
        None => layer.allow_origin(Any),
    }
}

pub fn router(state: AppState) -> Router {
    let cors = cors(state.config.cors_origin.as_deref());
    routes::api(state).layer(cors)
}

/// Binds the listening socket, reporting an occupied port as [`ServerError::Bind`].
pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServerError> {
    TcpListener::bind(addr).await.map_err(|source| ServerError::Bind { addr, source })
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(listener: TcpListener, config: ServerConfig) -> Result<(), ServerError> {
    let app = router(AppState::new(config));
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
