//! Serves reader sessions over any ordered byte stream.

use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rollcall_core::{AuditAction, AuditEntry};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::TcpListener;
use tokio::sync::watch;

use super::frame::{encode, outcome_frame, EdgeFrame, LineDecoder, NakCode};
use super::session::{Action, SessionMachine};
use crate::node::EdgeHandle;

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEnd {
    PeerClosed,
    Idle,
    Reset,
    Shutdown,
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionReport {
    pub node_id: Option<String>,
    pub uid_frames: u64,
    pub scan_replies: u64,
    pub end: SessionEnd,
}

/// Counters across all sessions served.
#[derive(Debug, Default)]
pub struct LinkStats {
    pub sessions: AtomicU64,
    pub uid_frames: AtomicU64,
    pub scan_replies: AtomicU64,
    pub resets: AtomicU64,
    pub store_errors: AtomicU64,
}

pub struct ReaderServer {
    node: EdgeHandle,
    idle_timeout: Duration,
    nonces: Mutex<ChaCha8Rng>,
    stats: LinkStats,
}

impl ReaderServer {
    pub fn new(node: EdgeHandle, idle_timeout: Duration, nonce_seed: u64) -> Self {
        ReaderServer {
            node,
            idle_timeout,
            nonces: Mutex::new(ChaCha8Rng::seed_from_u64(nonce_seed)),
            stats: LinkStats::default(),
        }
    }

    pub fn stats(&self) -> &LinkStats {
        &self.stats
    }

    fn nonce(&self) -> String {
        format!("{:016X}", self.nonces.lock().random::<u64>())
    }

    /// Runs one session to completion.
    pub async fn serve_stream<S>(&self, mut stream: S, mut shutdown: watch::Receiver<bool>) -> SessionReport
    where
        S: AsyncRead + AsyncWrite + Unpin,
    {
        self.stats.sessions.fetch_add(1, Ordering::Relaxed);
        let mut machine = SessionMachine::new();
        let mut decoder = LineDecoder::new();
        let mut report = SessionReport {
            node_id: None,
            uid_frames: 0,
            scan_replies: 0,
            end: SessionEnd::PeerClosed,
        };
        let mut buf = [0u8; 512];
        let end = 'session: loop {
            let n = tokio::select! {
                r = tokio::time::timeout(self.idle_timeout, stream.read(&mut buf)) => match r {
                    Err(_) => break SessionEnd::Idle,
                    Ok(Err(e)) => break SessionEnd::Io(e.to_string()),
                    Ok(Ok(0)) => break SessionEnd::PeerClosed,
                    Ok(Ok(n)) => n,
                },
                _ = shutdown.wait_for(|stop| *stop) => break SessionEnd::Shutdown,
            };
            let mut out = Vec::new();
            for line in decoder.push(&buf[..n]) {
                let reply = match machine.on_line(line, &mut || self.nonce()) {
                    Action::Reply(f) => f,
                    Action::Scan { uid, node_id } => {
                        report.uid_frames += 1;
                        report.scan_replies += 1;
                        match self.node.scan(uid, &node_id).await {
                            Ok(o) => outcome_frame(o),
                            Err(e) => {
                                tracing::warn!(error = %e, "scan not recorded");
                                self.stats.store_errors.fetch_add(1, Ordering::Relaxed);
                                EdgeFrame::Nak(NakCode::Error)
                            }
                        }
                    }
                    Action::Unsolicited(uid) => {
                        report.uid_frames += 1;
                        report.scan_replies += 1;
                        let entry = AuditEntry::new(
                            self.node.now(),
                            "reader:unidentified",
                            AuditAction::Scan,
                            uid.to_string(),
                            "rejected no_handshake",
                        );
                        if let Err(e) = self.node.audit(entry).await {
                            tracing::warn!(error = %e, "audit not recorded");
                        }
                        EdgeFrame::Nak(NakCode::Error)
                    }
                    Action::Reset => {
                        out.extend(encode(&EdgeFrame::Reset));
                        let _ = write_all(&mut stream, &out).await;
                        self.stats.resets.fetch_add(1, Ordering::Relaxed);
                        break 'session SessionEnd::Reset;
                    }
                };
                out.extend(encode(&reply));
            }
            if !out.is_empty() {
                if let Err(e) = write_all(&mut stream, &out).await {
                    break SessionEnd::Io(e.to_string());
                }
            }
        };
        report.node_id = machine.node_id().map(str::to_string);
        report.end = end;
        self.stats.uid_frames.fetch_add(report.uid_frames, Ordering::Relaxed);
        self.stats.scan_replies.fetch_add(report.scan_replies, Ordering::Relaxed);
        tracing::debug!(?report, "reader session ended");
        report
    }

    /// Accepts TCP reader connections until `shutdown` turns true.
    pub async fn serve_tcp(self: Arc<Self>, listener: TcpListener, mut shutdown: watch::Receiver<bool>) -> io::Result<()> {
        loop {
            let (sock, peer) = tokio::select! {
                r = listener.accept() => r?,
                _ = shutdown.wait_for(|stop| *stop) => return Ok(()),
            };
            let _ = sock.set_nodelay(true);
            tracing::debug!(%peer, "reader connected");
            let server = Arc::clone(&self);
            let rx = shutdown.clone();
            tokio::spawn(async move {
                server.serve_stream(sock, rx).await;
            });
        }
    }

    /// Serves a reader attached to a character device (a serial port already
    /// configured by the OS), reopening it whenever a session ends.
    pub async fn serve_device(self: Arc<Self>, path: PathBuf, mut shutdown: watch::Receiver<bool>) -> io::Result<()> {
        loop {
            if *shutdown.borrow() {
                return Ok(());
            }
            match tokio::fs::OpenOptions::new().read(true).write(true).open(&path).await {
                Ok(dev) => {
                    let report = self.serve_stream(dev, shutdown.clone()).await;
                    if report.end == SessionEnd::Shutdown {
                        return Ok(());
                    }
                }
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "cannot open reader device"),
            }
            tokio::select! {
                _ = tokio::time::sleep(Duration::from_secs(1)) => {}
                _ = shutdown.wait_for(|stop| *stop) => return Ok(()),
            }
        }
    }
}

async fn write_all<S: AsyncWrite + Unpin>(stream: &mut S, bytes: &[u8]) -> io::Result<()> {
    stream.write_all(bytes).await?;
    stream.flush().await
}
