//! Batch pipeline and HTTP service for the multimodal diagnostic assistant.

pub mod api;
pub mod cache;
pub mod config;
pub mod geometry;
pub mod pipeline;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::{router, AppState};
pub use config::{Config, ConfigError};
pub use pipeline::PipelineError;

/// Loads the artifacts and serves until ctrl-c.
pub async fn serve(cfg: &Config, bind: Option<&str>) -> Result<(), PipelineError> {
    let addr: SocketAddr = bind.unwrap_or(&cfg.bind).parse().map_err(|_| {
        ConfigError::Invalid(format!("bind address {:?}", bind.unwrap_or(&cfg.bind)))
    })?;
    let cfg2 = cfg.clone();
    let state = tokio::task::spawn_blocking(move || AppState::load(&cfg2))
        .await
        .expect("state loader")?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| PipelineError::Io {
            path: addr.to_string(),
            source,
        })?;
    let local = listener.local_addr().map_err(|source| PipelineError::Io {
        path: addr.to_string(),
        source,
    })?;
    eprintln!("diag-assistant listening on http://{local}");
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| PipelineError::Io {
            path: local.to_string(),
            source,
        })
}
