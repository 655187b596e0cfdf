//! Assembles a running edge node from its configuration.

use std::fs::File;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use rollcall_core::clock::{Clock, OffsetClock, SystemClock};
use rollcall_core::config::ConfigError;
use rollcall_core::journal::JournalOptions;
use rollcall_core::RandomIds;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::config::{ClockSpec, EdgeConfig, Listen};
use crate::link::ReaderServer;
use crate::node::{EdgeHandle, EdgeNode, NodeError};
use crate::store::{EdgeStore, StoreError};
use crate::sync::{Backoff, HttpTransport, SyncError, SyncSettings, SyncWorker};

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("edge store: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("roster seed: {0}")]
    Seed(String),
    #[error("sync setup: {0}")]
    Sync(#[from] SyncError),
}

pub fn make_clock(spec: ClockSpec) -> Arc<dyn Clock> {
    match spec {
        ClockSpec::System => Arc::new(SystemClock),
        ClockSpec::Offset { start, speed } => Arc::new(OffsetClock::new(start, speed)),
    }
}

/// Checks for due closures every `every` until shutdown.
pub async fn closure_loop(node: EdgeHandle, every: Duration, mut shutdown: watch::Receiver<bool>) {
    loop {
        if let Err(e) = node.run_due_closures().await {
            tracing::error!(error = %e, "closure failed");
        }
        tokio::select! {
            _ = tokio::time::sleep(every) => {}
            _ = shutdown.wait_for(|stop| *stop) => return,
        }
    }
}

pub struct EdgeRuntime {
    node: Option<EdgeNode>,
    /// Bound address when listening on TCP.
    pub reader_addr: Option<SocketAddr>,
    pub server: Arc<ReaderServer>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl EdgeRuntime {
    /// Opens the store, catches up on missed closures and starts the reader
    /// listener, closure scheduler and (if configured) the sync loop.
    pub async fn start(cfg: EdgeConfig) -> Result<Self, EdgeError> {
        let clock = make_clock(cfg.clock);
        let today = cfg.policy.local_day(clock.now());
        let store = EdgeStore::open(
            &cfg.store_path,
            &cfg.node_id,
            today,
            JournalOptions {
                max_bytes: cfg.store_max_bytes,
            },
        )?;
        let recovery = store.recovery();
        if recovery.truncated_bytes > 0 {
            tracing::warn!(bytes = recovery.truncated_bytes, "cut torn tail from edge store");
        }
        let needs_seed = store.roster().is_empty();
        let node = EdgeNode::start(store, cfg.policy.clone(), Arc::clone(&clock), Box::new(RandomIds));
        let handle = node.handle();

        if let (true, Some(path)) = (needs_seed, &cfg.seed_roster) {
            let file = File::open(path).map_err(|source| EdgeError::Io {
                context: format!("opening {}", path.display()),
                source,
            })?;
            let (students, cards) = crate::seed::read_seed(file, clock.now()).map_err(EdgeError::Seed)?;
            tracing::info!(students = students.len(), cards = cards.len(), "roster seeded");
            handle.import_roster(students, cards).await?;
        }
        handle.run_due_closures().await?;

        let (shutdown, rx) = watch::channel(false);
        let server = Arc::new(ReaderServer::new(handle.clone(), cfg.idle_timeout, rand::random()));
        let mut tasks = Vec::new();
        let mut reader_addr = None;
        match &cfg.listen {
            Listen::Tcp(addr) => {
                let listener = TcpListener::bind(addr).await.map_err(|source| EdgeError::Io {
                    context: format!("binding reader listener tcp:{addr}"),
                    source,
                })?;
                reader_addr = Some(listener.local_addr().map_err(|source| EdgeError::Io {
                    context: "reader listener".into(),
                    source,
                })?);
                let (s, rx) = (Arc::clone(&server), rx.clone());
                tasks.push(tokio::spawn(async move {
                    if let Err(e) = s.serve_tcp(listener, rx).await {
                        tracing::error!(error = %e, "reader listener stopped");
                    }
                }));
            }
            Listen::Serial(path) => {
                let (s, rx, path) = (Arc::clone(&server), rx.clone(), path.clone());
                tasks.push(tokio::spawn(async move {
                    let _ = s.serve_device(path, rx).await;
                }));
            }
        }
        tasks.push(tokio::spawn(closure_loop(handle.clone(), cfg.closure_check, rx.clone())));
        if let Some(central) = &cfg.central {
            let transport = HttpTransport::new(&central.url, Duration::from_secs(10))?;
            let worker = SyncWorker::new(
                handle.clone(),
                transport,
                SyncSettings {
                    node_id: cfg.node_id.clone(),
                    secret: central.secret.clone(),
                    batch_size: central.batch_size,
                    interval: central.interval,
                },
                Backoff::default(),
            );
            tasks.push(tokio::spawn(worker.run(rx.clone())));
        }
        Ok(EdgeRuntime {
            node: Some(node),
            reader_addr,
            server,
            shutdown,
            tasks,
        })
    }

    pub fn handle(&self) -> EdgeHandle {
        self.node.as_ref().expect("running").handle()
    }

    /// Stops listeners and loops, then the writer.
    pub async fn shutdown(mut self) {
        let _ = self.shutdown.send(true);
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
        if let Some(node) = self.node.take() {
            let _ = tokio::task::spawn_blocking(move || drop(node)).await;
        }
    }
}
