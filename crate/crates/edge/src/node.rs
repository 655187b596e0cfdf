//! The edge node's single writer.
//!
//! Every mutation (scans, closures, sync acknowledgements, roster updates)
//! goes through one command queue drained by a dedicated thread that owns
//! write access to the store. Readers take snapshots through a shared lock.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use chrono::{DateTime, NaiveDate, Utc};
use parking_lot::RwLock;
use rollcall_core::clock::Clock;
use rollcall_core::sync::{RosterDelta, SyncBatch};
use rollcall_core::{
    AttendanceEngine, AuditEntry, CardUid, EngineError, IdSource, RfidCard, ScanOutcome, StudentRecord,
    TimeWindowPolicy,
};
use thiserror::Error;
use tokio::sync::oneshot;

use crate::store::{EdgeStore, StoreError};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("edge store unavailable: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("edge node stopped")]
    Stopped,
}

type Reply<T> = oneshot::Sender<Result<T, NodeError>>;

enum Command {
    Scan { uid: CardUid, reader: String, reply: Reply<ScanOutcome> },
    Audit { entry: AuditEntry, reply: Reply<()> },
    Closure { day: Option<NaiveDate>, reply: Reply<Vec<(NaiveDate, usize)>> },
    MarkSynced { high_water: u64, reply: Reply<()> },
    ApplyRoster { delta: RosterDelta, reply: Reply<()> },
    ImportRoster { students: Vec<StudentRecord>, cards: Vec<RfidCard>, reply: Reply<()> },
    Stop,
}

struct Shared {
    store: RwLock<EdgeStore>,
    engine: AttendanceEngine,
    clock: Arc<dyn Clock>,
}

/// Owns the writer thread. Dropping it stops the thread once queued
/// commands are drained.
pub struct EdgeNode {
    handle: EdgeHandle,
    thread: Option<JoinHandle<()>>,
}

#[derive(Clone)]
pub struct EdgeHandle {
    tx: mpsc::Sender<Command>,
    shared: Arc<Shared>,
}

impl EdgeNode {
    pub fn start(store: EdgeStore, policy: TimeWindowPolicy, clock: Arc<dyn Clock>, ids: Box<dyn IdSource>) -> Self {
        let shared = Arc::new(Shared {
            store: RwLock::new(store),
            engine: AttendanceEngine::new(policy),
            clock,
        });
        let (tx, rx) = mpsc::channel();
        let writer = Arc::clone(&shared);
        let thread = thread::Builder::new()
            .name("edge-writer".into())
            .spawn(move || writer_loop(rx, writer, ids))
            .expect("spawn edge writer");
        EdgeNode {
            handle: EdgeHandle { tx, shared },
            thread: Some(thread),
        }
    }

    pub fn handle(&self) -> EdgeHandle {
        self.handle.clone()
    }

    /// Stops the writer after pending commands and returns the store.
    pub fn shutdown(mut self) -> Option<EdgeStore> {
        self.stop();
        let shared = Arc::clone(&self.handle.shared);
        drop(self);
        Arc::try_unwrap(shared).ok().map(|s| s.store.into_inner())
    }

    fn stop(&mut self) {
        let _ = self.handle.tx.send(Command::Stop);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for EdgeNode {
    fn drop(&mut self) {
        self.stop();
    }
}

fn writer_loop(rx: mpsc::Receiver<Command>, shared: Arc<Shared>, mut ids: Box<dyn IdSource>) {
    while let Ok(cmd) = rx.recv() {
        match cmd {
            Command::Scan { uid, reader, reply } => {
                let now = shared.clock.now();
                let mut store = shared.store.write();
                let d = shared.engine.process_scan(
                    uid,
                    now,
                    &reader,
                    store.cards(),
                    store.roster(),
                    store.ledger(),
                    ids.as_mut(),
                );
                let res = match d.event {
                    Some(e) => store.append_event(e, Some(d.audit)).map(|_| ()),
                    None => store.append_audit(d.audit),
                };
                let _ = reply.send(res.map(|_| d.outcome).map_err(NodeError::from));
            }
            Command::Audit { entry, reply } => {
                let _ = reply.send(shared.store.write().append_audit(entry).map_err(NodeError::from));
            }
            Command::Closure { day, reply } => {
                let now = shared.clock.now();
                let mut store = shared.store.write();
                let _ = reply.send(close_days(&shared.engine, &mut store, day, now, ids.as_mut()));
            }
            Command::MarkSynced { high_water, reply } => {
                let _ = reply.send(shared.store.write().mark_synced(high_water).map_err(NodeError::from));
            }
            Command::ApplyRoster { delta, reply } => {
                let _ = reply.send(shared.store.write().apply_roster(&delta).map_err(NodeError::from));
            }
            Command::ImportRoster { students, cards, reply } => {
                let _ = reply.send(shared.store.write().import_roster(students, cards).map_err(NodeError::from));
            }
            Command::Stop => break,
        }
    }
}

fn close_days(
    engine: &AttendanceEngine,
    store: &mut EdgeStore,
    day: Option<NaiveDate>,
    now: DateTime<Utc>,
    ids: &mut dyn IdSource,
) -> Result<Vec<(NaiveDate, usize)>, NodeError> {
    let days = match day {
        Some(d) => vec![d],
        None => engine.due_closures(store.created_on(), now, store.ledger()),
    };
    let mut done = Vec::with_capacity(days.len());
    for d in days {
        let events = engine.run_closure(d, now, store.roster(), store.ledger(), ids)?;
        let n = store.commit_closure(d, events)?.len();
        tracing::info!(day = %d, absent = n, "closure committed");
        done.push((d, n));
    }
    Ok(done)
}

impl EdgeHandle {
    fn submit<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> oneshot::Receiver<Result<T, NodeError>> {
        let (tx, rx) = oneshot::channel();
        // A send failure drops `tx`, which the receiver reports as Stopped.
        let _ = self.tx.send(make(tx));
        rx
    }

    async fn ask<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, NodeError> {
        self.submit(make).await.unwrap_or(Err(NodeError::Stopped))
    }

    /// Processes one card scan from the reader identified by `reader`.
    pub async fn scan(&self, uid: CardUid, reader: &str) -> Result<ScanOutcome, NodeError> {
        let reader = reader.to_string();
        self.ask(|reply| Command::Scan { uid, reader, reply }).await
    }

    /// Blocking variant of [`scan`](Self::scan) for callers outside a runtime.
    pub fn scan_blocking(&self, uid: CardUid, reader: &str) -> Result<ScanOutcome, NodeError> {
        let reader = reader.to_string();
        self.submit(|reply| Command::Scan { uid, reader, reply })
            .blocking_recv()
            .unwrap_or(Err(NodeError::Stopped))
    }

    pub async fn audit(&self, entry: AuditEntry) -> Result<(), NodeError> {
        self.ask(|reply| Command::Audit { entry, reply }).await
    }

    /// Runs every closure that is due and not yet run, oldest first.
    pub async fn run_due_closures(&self) -> Result<Vec<(NaiveDate, usize)>, NodeError> {
        self.ask(|reply| Command::Closure { day: None, reply }).await
    }

    pub async fn run_closure(&self, day: NaiveDate) -> Result<usize, NodeError> {
        let done = self.ask(|reply| Command::Closure { day: Some(day), reply }).await?;
        Ok(done.first().map_or(0, |(_, n)| *n))
    }

    pub async fn mark_synced(&self, high_water: u64) -> Result<(), NodeError> {
        self.ask(|reply| Command::MarkSynced { high_water, reply }).await
    }

    pub async fn apply_roster(&self, delta: RosterDelta) -> Result<(), NodeError> {
        self.ask(|reply| Command::ApplyRoster { delta, reply }).await
    }

    pub async fn import_roster(&self, students: Vec<StudentRecord>, cards: Vec<RfidCard>) -> Result<(), NodeError> {
        self.ask(|reply| Command::ImportRoster { students, cards, reply }).await
    }

    /// Runs `f` against a consistent snapshot of the store.
    pub fn read<R>(&self, f: impl FnOnce(&EdgeStore) -> R) -> R {
        f(&self.shared.store.read())
    }

    pub fn pending_batch(&self, max_n: usize) -> SyncBatch {
        self.read(|s| s.pending_batch(max_n))
    }

    pub fn batch_from(&self, first_sequence: u64, max_n: usize) -> SyncBatch {
        self.read(|s| s.batch_from(first_sequence, max_n))
    }

    pub fn node_id(&self) -> String {
        self.read(|s| s.node_id().to_string())
    }

    pub fn policy(&self) -> &TimeWindowPolicy {
        self.shared.engine.policy()
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.shared.clock.now()
    }
}
