//! Edge side of synchronization with central: roster pull, then event push
//! until drained, with re-authentication, rewind on sequence gaps and
//! exponential backoff while central is unreachable.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use rollcall_core::rbac::Endpoint;
use rollcall_core::sync::{ErrorBody, PushResponse, RosterDelta, SyncBatch, TokenRequest, TokenResponse, MAX_BATCH_EVENTS};
use thiserror::Error;
use tokio::sync::watch;

use crate::node::{EdgeHandle, NodeError};

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("central unreachable: {0}")]
    Network(String),
    #[error("sync token expired")]
    AuthExpired,
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("batch checksum rejected")]
    ChecksumMismatch,
    #[error("sequence gap, central is at {high_water}")]
    SequenceGap { high_water: u64 },
    #[error("central rejected request ({status}): {error}: {message}")]
    Rejected { status: u16, error: String, message: String },
    #[error(transparent)]
    Node(#[from] NodeError),
}

#[async_trait]
pub trait SyncTransport: Send + Sync {
    async fn issue_token(&self, req: &TokenRequest) -> Result<TokenResponse, SyncError>;
    async fn push_events(&self, token: &str, batch: &SyncBatch) -> Result<PushResponse, SyncError>;
    async fn pull_roster(&self, token: &str, since: u64) -> Result<RosterDelta, SyncError>;
}

#[async_trait]
impl<T: SyncTransport + ?Sized> SyncTransport for Arc<T> {
    async fn issue_token(&self, req: &TokenRequest) -> Result<TokenResponse, SyncError> {
        (**self).issue_token(req).await
    }

    async fn push_events(&self, token: &str, batch: &SyncBatch) -> Result<PushResponse, SyncError> {
        (**self).push_events(token, batch).await
    }

    async fn pull_roster(&self, token: &str, since: u64) -> Result<RosterDelta, SyncError> {
        (**self).pull_roster(token, since).await
    }
}

/// JSON over HTTP against the central API.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    client: reqwest::Client,
    base: String,
}

impl HttpTransport {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self, SyncError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| SyncError::Network(e.to_string()))?;
        Ok(HttpTransport {
            client,
            base: base_url.trim_end_matches('/').to_string(),
        })
    }

    fn url(&self, ep: Endpoint) -> String {
        format!("{}{}", self.base, ep.path())
    }

    async fn decode<R: serde::de::DeserializeOwned>(resp: reqwest::Response) -> Result<R, SyncError> {
        let status = resp.status().as_u16();
        if resp.status().is_success() {
            return resp.json().await.map_err(|e| SyncError::Network(e.to_string()));
        }
        let body: ErrorBody = resp.json().await.unwrap_or_else(|_| ErrorBody {
            error: "unknown".into(),
            message: String::new(),
            high_water: None,
        });
        Err(match (status, body.error.as_str()) {
            (401, "auth_expired") => SyncError::AuthExpired,
            (401, _) => SyncError::Unauthorized(body.message),
            (_, "checksum_mismatch") => SyncError::ChecksumMismatch,
            (_, "sequence_gap") => SyncError::SequenceGap {
                high_water: body.high_water.unwrap_or(0),
            },
            _ => SyncError::Rejected {
                status,
                error: body.error,
                message: body.message,
            },
        })
    }
}

fn net(e: reqwest::Error) -> SyncError {
    SyncError::Network(e.to_string())
}

#[async_trait]
impl SyncTransport for HttpTransport {
    async fn issue_token(&self, req: &TokenRequest) -> Result<TokenResponse, SyncError> {
        let resp = self.client.post(self.url(Endpoint::IssueSyncToken)).json(req).send().await.map_err(net)?;
        Self::decode(resp).await
    }

    async fn push_events(&self, token: &str, batch: &SyncBatch) -> Result<PushResponse, SyncError> {
        let resp = self
            .client
            .post(self.url(Endpoint::SyncEvents))
            .bearer_auth(token)
            .json(batch)
            .send()
            .await
            .map_err(net)?;
        Self::decode(resp).await
    }

    async fn pull_roster(&self, token: &str, since: u64) -> Result<RosterDelta, SyncError> {
        let url = format!("{}?since={since}", self.url(Endpoint::SyncRoster));
        let resp = self.client.get(url).bearer_auth(token).send().await.map_err(net)?;
        Self::decode(resp).await
    }
}

/// Cuts a transport off to simulate a network partition.
#[derive(Debug, Clone)]
pub struct Partitionable<T> {
    inner: T,
    up: Arc<AtomicBool>,
}

/// Controls a [`Partitionable`] transport from elsewhere.
#[derive(Debug, Clone)]
pub struct LinkSwitch(Arc<AtomicBool>);

impl LinkSwitch {
    pub fn set_up(&self, up: bool) {
        self.0.store(up, Ordering::SeqCst);
    }

    pub fn is_up(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

impl<T> Partitionable<T> {
    pub fn new(inner: T) -> (Self, LinkSwitch) {
        let up = Arc::new(AtomicBool::new(true));
        (
            Partitionable {
                inner,
                up: Arc::clone(&up),
            },
            LinkSwitch(up),
        )
    }

    fn check(&self) -> Result<(), SyncError> {
        if self.up.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(SyncError::Network("link down".into()))
        }
    }
}

#[async_trait]
impl<T: SyncTransport> SyncTransport for Partitionable<T> {
    async fn issue_token(&self, req: &TokenRequest) -> Result<TokenResponse, SyncError> {
        self.check()?;
        self.inner.issue_token(req).await
    }

    async fn push_events(&self, token: &str, batch: &SyncBatch) -> Result<PushResponse, SyncError> {
        self.check()?;
        self.inner.push_events(token, batch).await
    }

    async fn pull_roster(&self, token: &str, since: u64) -> Result<RosterDelta, SyncError> {
        self.check()?;
        self.inner.pull_roster(token, since).await
    }
}

/// Doubling delay from `base` up to `cap`.
#[derive(Debug, Clone)]
pub struct Backoff {
    base: Duration,
    cap: Duration,
    failures: u32,
}

impl Backoff {
    pub const DEFAULT_BASE: Duration = Duration::from_secs(5);
    pub const DEFAULT_CAP: Duration = Duration::from_secs(300);

    pub fn new(base: Duration, cap: Duration) -> Self {
        Backoff { base, cap, failures: 0 }
    }

    pub fn next_delay(&mut self) -> Duration {
        let factor = 1u32.checked_shl(self.failures.min(31)).unwrap_or(u32::MAX);
        self.failures = self.failures.saturating_add(1);
        self.base.saturating_mul(factor).min(self.cap)
    }

    pub fn reset(&mut self) {
        self.failures = 0;
    }

    pub fn failures(&self) -> u32 {
        self.failures
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff::new(Self::DEFAULT_BASE, Self::DEFAULT_CAP)
    }
}

#[derive(Debug, Clone)]
pub struct SyncSettings {
    pub node_id: String,
    pub secret: String,
    pub batch_size: usize,
    pub interval: Duration,
}

/// Totals for one `run_once` round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundReport {
    pub roster_version: u64,
    pub roster_changes: usize,
    pub batches: u64,
    pub pushed: u64,
    pub duplicates: u64,
    pub conflicts: u64,
    pub rewinds: u64,
    pub reauths: u64,
}

const MAX_REWINDS: u64 = 3;
const MAX_CHECKSUM_RETRIES: u32 = 3;

pub struct SyncWorker<T> {
    node: EdgeHandle,
    transport: T,
    settings: SyncSettings,
    token: Option<String>,
    backoff: Backoff,
    last_error: Option<String>,
}

impl<T: SyncTransport> SyncWorker<T> {
    pub fn new(node: EdgeHandle, transport: T, settings: SyncSettings, backoff: Backoff) -> Self {
        SyncWorker {
            node,
            transport,
            settings,
            token: None,
            backoff,
            last_error: None,
        }
    }

    pub fn last_error(&self) -> Option<&str> {
        self.last_error.as_deref()
    }

    /// Drops the cached token so the next call authenticates again.
    pub fn forget_token(&mut self) {
        self.token = None;
    }

    async fn token(&mut self) -> Result<String, SyncError> {
        if let Some(t) = &self.token {
            return Ok(t.clone());
        }
        let resp = self
            .transport
            .issue_token(&TokenRequest {
                node_id: self.settings.node_id.clone(),
                secret: self.settings.secret.clone(),
            })
            .await?;
        self.token = Some(resp.token.clone());
        Ok(resp.token)
    }

    async fn pull(&mut self, since: u64, report: &mut RoundReport) -> Result<RosterDelta, SyncError> {
        let token = self.token().await?;
        match self.transport.pull_roster(&token, since).await {
            Err(SyncError::AuthExpired) => {
                self.token = None;
                report.reauths += 1;
                let token = self.token().await?;
                self.transport.pull_roster(&token, since).await
            }
            r => r,
        }
    }

    async fn push(&mut self, batch: &SyncBatch, report: &mut RoundReport) -> Result<PushResponse, SyncError> {
        let token = self.token().await?;
        match self.transport.push_events(&token, batch).await {
            Err(SyncError::AuthExpired) => {
                self.token = None;
                report.reauths += 1;
                let token = self.token().await?;
                self.transport.push_events(&token, batch).await
            }
            r => r,
        }
    }

    /// One sync round: pull the roster, then push until nothing is pending.
    pub async fn run_once(&mut self) -> Result<RoundReport, SyncError> {
        let mut report = RoundReport::default();
        let since = self.node.read(|s| s.roster_version());
        let delta = self.pull(since, &mut report).await?;
        report.roster_version = delta.version;
        report.roster_changes = delta.students.len() + delta.cards.len();
        if delta.version != since || !delta.is_empty() {
            self.node.apply_roster(delta).await?;
        }

        let batch_size = self.settings.batch_size.clamp(1, MAX_BATCH_EVENTS);
        let mut next = self.node.read(|s| s.high_water()) + 1;
        let mut checksum_failures = 0;
        loop {
            let batch = self.node.batch_from(next, batch_size);
            if batch.is_empty() {
                break;
            }
            match self.push(&batch, &mut report).await {
                Ok(resp) => {
                    report.batches += 1;
                    report.pushed += batch.len() as u64;
                    report.duplicates += resp.duplicates;
                    report.conflicts += resp.conflicts;
                    let acked = resp.accepted_high_water.min(batch.last_sequence);
                    if acked > self.node.read(|s| s.high_water()) {
                        self.node.mark_synced(acked).await?;
                    }
                    next = acked.max(batch.last_sequence) + 1;
                }
                Err(SyncError::SequenceGap { high_water }) => {
                    report.rewinds += 1;
                    if report.rewinds > MAX_REWINDS {
                        return Err(SyncError::SequenceGap { high_water });
                    }
                    tracing::info!(central = high_water, local = next - 1, "rewinding to central high-water");
                    next = high_water + 1;
                }
                Err(SyncError::ChecksumMismatch) if checksum_failures < MAX_CHECKSUM_RETRIES => {
                    checksum_failures += 1;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(report)
    }

    /// Runs a round and returns how long to wait before the next one.
    pub async fn tick(&mut self) -> (Result<RoundReport, String>, Duration) {
        match self.run_once().await {
            Ok(r) => {
                self.backoff.reset();
                self.last_error = None;
                (Ok(r), self.settings.interval)
            }
            Err(e) => {
                let msg = e.to_string();
                if matches!(e, SyncError::Unauthorized(_)) {
                    self.token = None;
                }
                tracing::warn!(error = %msg, "sync round failed");
                self.last_error = Some(msg.clone());
                (Err(msg), self.backoff.next_delay())
            }
        }
    }

    /// Syncs on a fixed interval in real time until `shutdown` turns true.
    pub async fn run(mut self, mut shutdown: watch::Receiver<bool>) {
        loop {
            let (_, wait) = self.tick().await;
            tokio::select! {
                _ = tokio::time::sleep(wait) => {}
                _ = shutdown.wait_for(|stop| *stop) => return,
            }
        }
    }
}
