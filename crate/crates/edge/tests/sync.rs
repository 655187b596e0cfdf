mod common;

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chrono::Utc;
use common::*;
use parking_lot::Mutex;
use rollcall_core::clock::VirtualClock;
use rollcall_core::sync::{PushResponse, RosterDelta, SyncBatch, TokenRequest, TokenResponse};
use rollcall_core::{CardState, EventId, RfidCard, ScanOutcome, RejectReason};
use rollcall_edge::sync::{Backoff, Partitionable, SyncError, SyncSettings, SyncTransport, SyncWorker};

/// Minimal stand-in for central: event_id dedup, per-node high-water,
/// tokens that can be expired on demand.
#[derive(Default)]
struct FakeCentral {
    state: Mutex<FakeState>,
    pushes: AtomicU64,
    pulls: AtomicU64,
}

#[derive(Default)]
struct FakeState {
    tokens: HashSet<String>,
    issued: u64,
    events: BTreeMap<EventId, u64>,
    high_water: u64,
    roster_version: u64,
    cards: Vec<RfidCard>,
}

impl FakeCentral {
    fn expire_tokens(&self) {
        self.state.lock().tokens.clear();
    }

    fn event_ids(&self) -> Vec<EventId> {
        self.state.lock().events.keys().copied().collect()
    }
}

#[async_trait]
impl SyncTransport for FakeCentral {
    async fn issue_token(&self, req: &TokenRequest) -> Result<TokenResponse, SyncError> {
        if req.secret != "s3cret" {
            return Err(SyncError::Unauthorized("bad secret".into()));
        }
        let mut st = self.state.lock();
        st.issued += 1;
        let token = format!("t{}", st.issued);
        st.tokens.insert(token.clone());
        Ok(TokenResponse {
            token,
            node_id: req.node_id.clone(),
            expires_at: Utc::now(),
        })
    }

    async fn push_events(&self, token: &str, batch: &SyncBatch) -> Result<PushResponse, SyncError> {
        self.pushes.fetch_add(1, Ordering::SeqCst);
        let mut st = self.state.lock();
        if !st.tokens.contains(token) {
            return Err(SyncError::AuthExpired);
        }
        batch.verify().map_err(|_| SyncError::ChecksumMismatch)?;
        if batch.first_sequence > st.high_water + 1 {
            return Err(SyncError::SequenceGap {
                high_water: st.high_water,
            });
        }
        let mut duplicates = 0;
        for e in &batch.events {
            if st.events.insert(e.event_id, e.edge_sequence).is_some() {
                duplicates += 1;
            }
        }
        st.high_water = st.high_water.max(batch.last_sequence);
        Ok(PushResponse {
            accepted_high_water: st.high_water,
            duplicates,
            conflicts: 0,
        })
    }

    async fn pull_roster(&self, token: &str, since: u64) -> Result<RosterDelta, SyncError> {
        self.pulls.fetch_add(1, Ordering::SeqCst);
        let st = self.state.lock();
        if !st.tokens.contains(token) {
            return Err(SyncError::AuthExpired);
        }
        Ok(RosterDelta {
            version: st.roster_version,
            students: vec![],
            cards: if since < st.roster_version { st.cards.clone() } else { vec![] },
        })
    }
}

fn settings(batch_size: usize) -> SyncSettings {
    SyncSettings {
        node_id: "gate-1".into(),
        secret: "s3cret".into(),
        batch_size,
        interval: Duration::from_secs(30),
    }
}

async fn scan_all(node: &rollcall_edge::EdgeNode, range: std::ops::Range<usize>) {
    for i in range {
        node.handle().scan(uid(i), "gate-1").await.unwrap();
    }
}

#[tokio::test]
async fn empty_log_pulls_only() {
    let dir = tempfile::tempdir().unwrap();
    let node = start_node(dir.path(), Arc::new(VirtualClock::new(at(monday(), 7, 10, 0))), 3);
    let central = Arc::new(FakeCentral::default());
    let mut w = SyncWorker::new(node.handle(), Arc::clone(&central), settings(500), Backoff::default());
    let r = w.run_once().await.unwrap();
    assert_eq!(r.batches, 0);
    assert_eq!(central.pulls.load(Ordering::SeqCst), 1);
    assert_eq!(central.pushes.load(Ordering::SeqCst), 0);
}

#[tokio::test]
async fn drains_in_batches_and_reauthenticates() {
    let dir = tempfile::tempdir().unwrap();
    let node = start_node(dir.path(), Arc::new(VirtualClock::new(at(monday(), 7, 10, 0))), 40);
    let central = Arc::new(FakeCentral::default());
    let mut w = SyncWorker::new(node.handle(), Arc::clone(&central), settings(7), Backoff::default());
    scan_all(&node, 0..20).await;
    let r = w.run_once().await.unwrap();
    assert_eq!((r.batches, r.pushed, r.reauths), (3, 20, 0));

    central.expire_tokens();
    scan_all(&node, 20..40).await;
    let r = w.run_once().await.unwrap();
    assert_eq!(r.reauths, 1);
    assert_eq!(r.pushed, 20);
    assert_eq!(node.handle().read(|s| s.high_water()), 40);
    assert_eq!(central.event_ids().len(), 40);
}

#[tokio::test]
async fn rewinds_when_central_is_behind() {
    let dir = tempfile::tempdir().unwrap();
    let node = start_node(dir.path(), Arc::new(VirtualClock::new(at(monday(), 7, 10, 0))), 30);
    let central = Arc::new(FakeCentral::default());
    let mut w = SyncWorker::new(node.handle(), Arc::clone(&central), settings(500), Backoff::default());
    scan_all(&node, 0..10).await;
    w.run_once().await.unwrap();
    // Central restored from an older backup: it knows only the first 4.
    {
        let mut st = central.state.lock();
        st.high_water = 4;
        st.events.retain(|_, seq| *seq <= 4);
    }
    scan_all(&node, 10..30).await;
    let r = w.run_once().await.unwrap();
    assert_eq!(r.rewinds, 1);
    let got: HashSet<_> = central.event_ids().into_iter().collect();
    let want: HashSet<_> = node.handle().read(|s| s.events().iter().map(|e| e.event_id).collect());
    assert_eq!(got, want);
    assert_eq!(central.state.lock().high_water, 30);
}

#[tokio::test]
async fn partition_then_exactly_once() {
    let dir = tempfile::tempdir().unwrap();
    let node = start_node(dir.path(), Arc::new(VirtualClock::new(at(monday(), 7, 10, 0))), 300);
    let central = Arc::new(FakeCentral::default());
    let (transport, link) = Partitionable::new(Arc::clone(&central));
    let mut w = SyncWorker::new(node.handle(), transport, settings(50), Backoff::default());
    scan_all(&node, 0..10).await;
    assert!(w.tick().await.0.is_ok());

    link.set_up(false);
    let mut delays = Vec::new();
    for chunk in 0..29 {
        scan_all(&node, 10 + chunk * 10..20 + chunk * 10).await;
        let (res, wait) = w.tick().await;
        assert!(res.is_err());
        delays.push(wait.as_secs());
    }
    assert_eq!(&delays[..8], &[5, 10, 20, 40, 80, 160, 300, 300]);
    assert_eq!(central.event_ids().len(), 10);

    link.set_up(true);
    let (res, wait) = w.tick().await;
    assert_eq!(res.unwrap().pushed, 290);
    assert_eq!(wait, Duration::from_secs(30));
    let got = central.event_ids();
    assert_eq!(got.len(), 300);
    let want: HashSet<_> = node.handle().read(|s| s.events().iter().map(|e| e.event_id).collect());
    assert_eq!(got.into_iter().collect::<HashSet<_>>(), want);
}

#[tokio::test]
async fn lost_ack_is_resent_and_deduplicated() {
    let dir = tempfile::tempdir().unwrap();
    let node = start_node(dir.path(), Arc::new(VirtualClock::new(at(monday(), 7, 10, 0))), 5);
    let central = Arc::new(FakeCentral::default());
    scan_all(&node, 0..5).await;
    // Central accepted the batch, but the edge crashed before mark_synced.
    let batch = node.handle().pending_batch(500);
    central.state.lock().tokens.insert("x".into());
    central.push_events("x", &batch).await.unwrap();
    let mut w = SyncWorker::new(node.handle(), Arc::clone(&central), settings(500), Backoff::default());
    let r = w.run_once().await.unwrap();
    assert_eq!(r.duplicates, 5);
    assert_eq!(central.event_ids().len(), 5);
    assert_eq!(node.handle().read(|s| s.high_water()), 5);
}

#[tokio::test]
async fn pulled_block_applies_before_next_scan() {
    let dir = tempfile::tempdir().unwrap();
    let node = start_node(dir.path(), Arc::new(VirtualClock::new(at(monday(), 7, 10, 0))), 2);
    let central = Arc::new(FakeCentral::default());
    let mut card = node.handle().read(|s| s.cards().get(&uid(1)).cloned()).unwrap();
    card.state = CardState::Blocked;
    {
        let mut st = central.state.lock();
        st.roster_version = 7;
        st.cards = vec![card];
    }
    let mut w = SyncWorker::new(node.handle(), Arc::clone(&central), settings(500), Backoff::default());
    w.run_once().await.unwrap();
    assert_eq!(node.handle().read(|s| s.roster_version()), 7);
    assert_eq!(
        node.handle().scan(uid(1), "gate-1").await.unwrap(),
        ScanOutcome::Rejected(RejectReason::CardBlocked)
    );
}

#[tokio::test]
async fn bad_secret_backs_off() {
    let dir = tempfile::tempdir().unwrap();
    let node = start_node(dir.path(), Arc::new(VirtualClock::new(at(monday(), 7, 10, 0))), 1);
    let mut s = settings(500);
    s.secret = "wrong".into();
    let mut w = SyncWorker::new(node.handle(), FakeCentral::default(), s, Backoff::default());
    let (res, wait) = w.tick().await;
    assert!(res.unwrap_err().contains("unauthorized"));
    assert_eq!(wait, Duration::from_secs(5));
    assert!(w.last_error().is_some());
}
