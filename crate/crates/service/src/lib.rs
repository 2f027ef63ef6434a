//! HTTP label brokerage: robots upload snapshots and poll tasks, workers claim
//! assignments and submit boxes, and every task change lands in an
//! append-only event log.

pub mod api;
pub mod broker;
pub mod config;
pub mod images;

use std::future::Future;
use std::path::Path;
use std::sync::Arc;

pub use api::router;
pub use broker::{Broker, CreateTaskRequest, ServiceError, StrategyRequest, SubmitRequest, TaskView};
pub use config::{ConfigError, ServiceConfig, CONFIG_ENV};

/// Replays a data directory's event log without starting anything.
pub fn replay_data_dir(dir: &Path) -> Result<nimbus_core::store::TaskStore, nimbus_core::store::StoreError> {
    let path = dir.join("events.jsonl");
    match std::fs::read_to_string(&path) {
        Ok(text) => nimbus_core::store::replay(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Default::default()),
        Err(e) => Err(e.into()),
    }
}

/// Serves `broker` on an already-bound listener until `shutdown` resolves.
pub async fn serve(
    broker: Arc<Broker>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(broker))
        .with_graceful_shutdown(shutdown)
        .await
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Opens the data directory, binds `config.listen` and serves until Ctrl-C.
pub fn run(config: ServiceConfig) -> Result<(), RunError> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let broker = Broker::open(config.clone())?;
        let listener = tokio::net::TcpListener::bind(&config.listen).await?;
        tracing::info!(
            "listening on {} ({:?} backend, data in {})",
            listener.local_addr()?,
            config.backend,
            config.data_dir.display()
        );
        serve(broker, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
