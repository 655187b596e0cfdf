//! Wires configuration, service and HTTP server together.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::serve::ListenerExt;
use rollcall_core::clock::{Clock, OffsetClock, SystemClock};
use rollcall_core::{IdSource, RandomIds};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::config::{CentralConfig, ClockSpec};
use crate::http::router;
use crate::service::{CentralService, ServiceError, ServiceOptions};

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
}

pub fn make_clock(spec: ClockSpec) -> Arc<dyn Clock> {
    match spec {
        ClockSpec::System => Arc::new(SystemClock),
        ClockSpec::Offset { start, speed } => Arc::new(OffsetClock::new(start, speed)),
    }
}

pub struct CentralRuntime {
    pub addr: SocketAddr,
    pub service: Arc<CentralService>,
    shutdown: watch::Sender<bool>,
    server: JoinHandle<std::io::Result<()>>,
}

impl CentralRuntime {
    pub async fn start(cfg: &CentralConfig) -> Result<Self, StartError> {
        Self::start_with(cfg, make_clock(cfg.clock), Box::new(RandomIds)).await
    }

    pub async fn start_with(
        cfg: &CentralConfig,
        clock: Arc<dyn Clock>,
        ids: Box<dyn IdSource>,
    ) -> Result<Self, StartError> {
        let service = Arc::new(CentralService::open(ServiceOptions::from_config(cfg), clock, ids)?);
        if let Some((user, password)) = &cfg.admin {
            if service.ensure_admin(user, password)? {
                tracing::info!(user, "created administrator");
            }
        }
        let listener = TcpListener::bind(cfg.listen).await.map_err(|source| StartError::Bind {
            addr: cfg.listen,
            source,
        })?;
        let addr = listener.local_addr().map_err(|source| StartError::Bind {
            addr: cfg.listen,
            source,
        })?;
        let app = router(service.clone(), cfg.cors_origin.as_deref());
        // Small JSON replies otherwise sit behind delayed ACKs.
        let listener = listener.tap_io(|tcp| {
            let _ = tcp.set_nodelay(true);
        });
        let (shutdown, mut rx) = watch::channel(false);
        let server = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = rx.wait_for(|v| *v).await;
                })
                .await
        });
        tracing::info!(%addr, "central listening");
        Ok(CentralRuntime {
            addr,
            service,
            shutdown,
            server,
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests and waits for in-flight ones.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.server.await;
    }

    /// Resolves when the server stops on its own.
    pub async fn wait(&mut self) -> std::io::Result<()> {
        match (&mut self.server).await {
            Ok(r) => r,
            Err(e) => Err(std::io::Error::other(e)),
        }
    }
}
