//! HTTP+JSON session service for preference-based tuning of the MPC weights
//! and horizon. Each session lives in one JSON file in the data directory;
//! candidate traces are recomputed on demand since simulations are
//! deterministic.

pub mod api;
pub mod engine;
pub mod store;
pub mod views;

use std::net::SocketAddr;
use std::path::Path;

pub use api::{CreateRequest, PreferenceRequest, Service, ServiceOptions, IDEMPOTENCY_HEADER};
pub use store::{SessionRecord, Status, Store, StoreError};
pub use views::API_SCHEMA_VERSION;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
    #[error("background task: {0}")]
    Join(#[from] tokio::task::JoinError),
}

/// Opens the data directory, finishes interrupted simulations and serves
/// until ctrl-c.
pub async fn serve(addr: SocketAddr, data_dir: &Path, options: ServiceOptions) -> Result<(), ServeError> {
    let service = Service::open(data_dir, options)?;
    let resumer = service.clone();
    let resumed = tokio::task::spawn_blocking(move || resumer.resume_interrupted()).await??;
    if resumed > 0 {
        tracing::info!(resumed, "resumed interrupted sessions");
    }
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServeError::Bind { addr, source })?;
    tracing::info!(addr = %listener.local_addr()?, dir = %data_dir.display(), "listening");
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
