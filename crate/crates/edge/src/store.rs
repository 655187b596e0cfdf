//! Durable edge-node state on top of the append-only journal.
//!
//! Holds the roster/card replica, the attendance event log (sequence
//! numbers start at 1 and have no gaps), the sync high-water mark, closure
//! markers and the local audit trail. Everything is rebuilt from the journal
//! on open.

use std::io::{self, Write};
use std::path::Path;

use chrono::NaiveDate;
use rollcall_core::journal::{Journal, JournalError, JournalOptions, Recovery};
use rollcall_core::sync::{RosterDelta, SyncBatch, MAX_BATCH_EVENTS};
use rollcall_core::{
    AttendanceEvent, AttendanceLedger, AuditEntry, CardTable, DomainError, LedgerError, RfidCard, Roster,
    StudentRecord,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage full")]
    StorageFull,
    #[error(transparent)]
    UniquenessViolation(#[from] LedgerError),
    #[error("invalid event: {0}")]
    InvalidEvent(#[from] DomainError),
    #[error("high-water mark may not move back from {current} to {requested}")]
    RegressionRejected { current: u64, requested: u64 },
    #[error("high-water mark {requested} is past the end of the log ({last})")]
    BeyondLog { requested: u64, last: u64 },
    #[error("store belongs to node {stored:?}, not {requested:?}")]
    NodeMismatch { stored: String, requested: String },
    #[error(transparent)]
    Journal(JournalError),
}

impl From<JournalError> for StoreError {
    fn from(e: JournalError) -> Self {
        match e {
            JournalError::StorageFull => StoreError::StorageFull,
            other => StoreError::Journal(other),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
enum EdgeRecord {
    Meta { node_id: String, created_on: NaiveDate },
    Student(StudentRecord),
    Card(RfidCard),
    RosterVersion { version: u64 },
    Event(AttendanceEvent),
    Audit(AuditEntry),
    HighWater { sequence: u64 },
    ClosureRan { day: NaiveDate },
}

fn prepare(ledger: &AttendanceLedger, mut event: AttendanceEvent, seq: u64) -> Result<AttendanceEvent, StoreError> {
    event.validate()?;
    ledger.check(&event)?;
    event.edge_sequence = seq;
    Ok(event)
}

#[derive(Debug)]
pub struct EdgeStore {
    journal: Journal<EdgeRecord>,
    node_id: String,
    created_on: NaiveDate,
    roster: Roster,
    cards: CardTable,
    roster_version: u64,
    log: Vec<AttendanceEvent>,
    ledger: AttendanceLedger,
    high_water: u64,
    audit: Vec<AuditEntry>,
    recovery: Recovery,
}

impl EdgeStore {
    /// Opens or creates the store at `path`. `today` is only recorded when
    /// the store is created; it bounds the search for missed closures.
    pub fn open(path: &Path, node_id: &str, today: NaiveDate, opts: JournalOptions) -> Result<Self, StoreError> {
        let (journal, records, recovery) = Journal::open(path, opts)?;
        let mut store = EdgeStore {
            journal,
            node_id: node_id.to_string(),
            created_on: today,
            roster: Roster::new(),
            cards: CardTable::new(),
            roster_version: 0,
            log: Vec::new(),
            ledger: AttendanceLedger::new(),
            high_water: 0,
            audit: Vec::new(),
            recovery,
        };
        if records.is_empty() {
            store.journal.append(&[EdgeRecord::Meta {
                node_id: node_id.to_string(),
                created_on: today,
            }])?;
        }
        for r in records {
            store.apply(r)?;
        }
        if store.node_id != node_id {
            return Err(StoreError::NodeMismatch {
                stored: store.node_id,
                requested: node_id.to_string(),
            });
        }
        Ok(store)
    }

    fn apply(&mut self, r: EdgeRecord) -> Result<(), StoreError> {
        match r {
            EdgeRecord::Meta { node_id, created_on } => {
                self.node_id = node_id;
                self.created_on = created_on;
            }
            EdgeRecord::Student(s) => self.roster.upsert(s),
            EdgeRecord::Card(c) => self.cards.upsert(c),
            EdgeRecord::RosterVersion { version } => self.roster_version = version,
            EdgeRecord::Event(e) => {
                self.ledger.insert(e.clone())?;
                self.log.push(e);
            }
            EdgeRecord::Audit(a) => self.audit.push(a),
            EdgeRecord::HighWater { sequence } => self.high_water = sequence,
            EdgeRecord::ClosureRan { day } => {
                self.ledger.mark_closed(day);
            }
        }
        Ok(())
    }

    /// Appends one event (and optionally its audit entry) durably and
    /// returns the assigned sequence number.
    pub fn append_event(&mut self, event: AttendanceEvent, audit: Option<AuditEntry>) -> Result<u64, StoreError> {
        let seq = self.last_sequence() + 1;
        let event = prepare(&self.ledger, event, seq)?;
        let mut recs = vec![EdgeRecord::Event(event.clone())];
        recs.extend(audit.clone().map(EdgeRecord::Audit));
        self.journal.append(&recs)?;
        self.ledger.insert(event.clone()).expect("checked");
        self.log.push(event);
        self.audit.extend(audit);
        Ok(seq)
    }

    /// Writes a day's closure events together with the closure marker in a
    /// single durable append.
    pub fn commit_closure(&mut self, day: NaiveDate, events: Vec<AttendanceEvent>) -> Result<Vec<AttendanceEvent>, StoreError> {
        let first = self.last_sequence() + 1;
        let mut scratch = self.ledger.clone();
        let mut prepared = Vec::with_capacity(events.len());
        for (i, e) in events.into_iter().enumerate() {
            let e = prepare(&scratch, e, first + i as u64)?;
            scratch.insert(e.clone())?;
            prepared.push(e);
        }
        let mut recs: Vec<EdgeRecord> = prepared.iter().cloned().map(EdgeRecord::Event).collect();
        recs.push(EdgeRecord::ClosureRan { day });
        self.journal.append(&recs)?;
        scratch.mark_closed(day);
        self.ledger = scratch;
        self.log.extend(prepared.iter().cloned());
        Ok(prepared)
    }

    pub fn append_audit(&mut self, audit: AuditEntry) -> Result<(), StoreError> {
        self.journal.append(&[EdgeRecord::Audit(audit.clone())])?;
        self.audit.push(audit);
        Ok(())
    }

    /// Up to `max_n` (clamped to 1..=500) events after the high-water mark.
    pub fn pending_batch(&self, max_n: usize) -> SyncBatch {
        self.batch_from(self.high_water + 1, max_n)
    }

    /// Up to `max_n` events starting at `first_sequence`.
    pub fn batch_from(&self, first_sequence: u64, max_n: usize) -> SyncBatch {
        let max_n = max_n.clamp(1, MAX_BATCH_EVENTS);
        let first = first_sequence.max(1);
        let start = (first - 1) as usize;
        let events = self.log.get(start..).unwrap_or(&[]).iter().take(max_n).cloned().collect();
        SyncBatch::new(self.node_id.clone(), first, events)
    }

    pub fn mark_synced(&mut self, ack_high_water: u64) -> Result<(), StoreError> {
        if ack_high_water < self.high_water {
            return Err(StoreError::RegressionRejected {
                current: self.high_water,
                requested: ack_high_water,
            });
        }
        if ack_high_water > self.last_sequence() {
            return Err(StoreError::BeyondLog {
                requested: ack_high_water,
                last: self.last_sequence(),
            });
        }
        if ack_high_water == self.high_water {
            return Ok(());
        }
        self.journal.append(&[EdgeRecord::HighWater {
            sequence: ack_high_water,
        }])?;
        self.high_water = ack_high_water;
        Ok(())
    }

    /// Applies a roster/card delta from central and records its version.
    pub fn apply_roster(&mut self, delta: &RosterDelta) -> Result<(), StoreError> {
        if delta.is_empty() && delta.version == self.roster_version {
            return Ok(());
        }
        let mut recs: Vec<EdgeRecord> = delta.students.iter().cloned().map(EdgeRecord::Student).collect();
        recs.extend(delta.cards.iter().cloned().map(EdgeRecord::Card));
        recs.push(EdgeRecord::RosterVersion { version: delta.version });
        self.journal.append(&recs)?;
        for s in &delta.students {
            self.roster.upsert(s.clone());
        }
        for c in &delta.cards {
            self.cards.upsert(c.clone());
        }
        self.roster_version = delta.version;
        Ok(())
    }

    /// Loads students and cards for a node that runs without central. The
    /// roster version is left unchanged.
    pub fn import_roster(&mut self, students: Vec<StudentRecord>, cards: Vec<RfidCard>) -> Result<(), StoreError> {
        let mut recs: Vec<EdgeRecord> = students.iter().cloned().map(EdgeRecord::Student).collect();
        recs.extend(cards.iter().cloned().map(EdgeRecord::Card));
        if recs.is_empty() {
            return Ok(());
        }
        self.journal.append(&recs)?;
        for s in students {
            self.roster.upsert(s);
        }
        for c in cards {
            self.cards.upsert(c);
        }
        Ok(())
    }

    /// Writes the event log as one JSON object per line, in sequence order.
    pub fn export_log<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.log {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn created_on(&self) -> NaiveDate {
        self.created_on
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn cards(&self) -> &CardTable {
        &self.cards
    }

    pub fn ledger(&self) -> &AttendanceLedger {
        &self.ledger
    }

    pub fn events(&self) -> &[AttendanceEvent] {
        &self.log
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn roster_version(&self) -> u64 {
        self.roster_version
    }

    pub fn high_water(&self) -> u64 {
        self.high_water
    }

    pub fn last_sequence(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn recovery(&self) -> Recovery {
        self.recovery
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use rollcall_core::{AttendanceStatus, CaptureMethod, IdSource, SeededIds, StudentCode};

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2025, 3, 10).unwrap()
    }

    fn rfid(ids: &mut SeededIds, n: u16) -> AttendanceEvent {
        AttendanceEvent {
            event_id: ids.next_id(),
            student_code: StudentCode::new(2025, 1, 'A', n).unwrap(),
            school_day: day(),
            status: AttendanceStatus::Present,
            recorded_at: Utc.with_ymd_and_hms(2025, 3, 10, 12, 10, 0).unwrap(),
            method: CaptureMethod::Rfid,
            recorded_by: None,
            edge_sequence: 0,
            supersedes: None,
        }
    }

    fn open(dir: &Path) -> EdgeStore {
        EdgeStore::open(&dir.join("edge.log"), "gate-1", day(), Default::default()).unwrap()
    }

    #[test]
    fn sequences_start_at_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let mut ids = SeededIds::new(1);
        assert_eq!(s.append_event(rfid(&mut ids, 1), None).unwrap(), 1);
        assert_eq!(s.append_event(rfid(&mut ids, 2), None).unwrap(), 2);
    }

    #[test]
    fn duplicate_student_day_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let mut ids = SeededIds::new(1);
        s.append_event(rfid(&mut ids, 1), None).unwrap();
        assert!(matches!(
            s.append_event(rfid(&mut ids, 1), None),
            Err(StoreError::UniquenessViolation(LedgerError::UniquenessViolation { .. }))
        ));
        assert_eq!(s.last_sequence(), 1);
    }

    #[test]
    fn pending_batches_and_high_water() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let mut ids = SeededIds::new(1);
        for n in 1..=3 {
            s.append_event(rfid(&mut ids, n), None).unwrap();
        }
        let b = s.pending_batch(10);
        assert_eq!((b.first_sequence, b.last_sequence, b.len()), (1, 3, 3));
        b.verify().unwrap();
        s.mark_synced(3).unwrap();
        assert!(s.pending_batch(10).is_empty());
        assert!(matches!(s.mark_synced(1), Err(StoreError::RegressionRejected { current: 3, requested: 1 })));
        s.mark_synced(3).unwrap();
        assert!(matches!(s.mark_synced(4), Err(StoreError::BeyondLog { .. })));
    }

    #[test]
    fn ack_five_then_three_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let mut ids = SeededIds::new(1);
        for n in 1..=5 {
            s.append_event(rfid(&mut ids, n), None).unwrap();
        }
        s.mark_synced(5).unwrap();
        assert!(matches!(s.mark_synced(3), Err(StoreError::RegressionRejected { .. })));
        assert_eq!(s.high_water(), 5);
    }

    #[test]
    fn state_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut ids = SeededIds::new(1);
        let exported = {
            let mut s = open(dir.path());
            for n in 1..=4 {
                s.append_event(rfid(&mut ids, n), None).unwrap();
            }
            s.mark_synced(2).unwrap();
            s.commit_closure(day(), vec![]).unwrap();
            let mut out = Vec::new();
            s.export_log(&mut out).unwrap();
            out
        };
        let s = open(dir.path());
        assert_eq!(s.high_water(), 2);
        assert!(s.ledger().is_closed(day()));
        let mut again = Vec::new();
        s.export_log(&mut again).unwrap();
        assert_eq!(exported, again);
        assert_eq!(s.pending_batch(500).first_sequence, 3);
    }

    #[test]
    fn other_node_cannot_open_store() {
        let dir = tempfile::tempdir().unwrap();
        drop(open(dir.path()));
        let err = EdgeStore::open(&dir.path().join("edge.log"), "gate-2", day(), Default::default()).unwrap_err();
        assert!(matches!(err, StoreError::NodeMismatch { .. }));
    }

    #[test]
    fn storage_full_surfaces() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = EdgeStore::open(
            &dir.path().join("edge.log"),
            "gate-1",
            day(),
            JournalOptions { max_bytes: Some(200) },
        )
        .unwrap();
        let mut ids = SeededIds::new(1);
        let mut full = false;
        for n in 1..=10 {
            if let Err(e) = s.append_event(rfid(&mut ids, n), None) {
                assert!(matches!(e, StoreError::StorageFull));
                full = true;
                break;
            }
        }
        assert!(full);
    }
}
