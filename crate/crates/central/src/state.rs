//! Central data model and the records it is rebuilt from.
//!
//! Every mutation is first written to the journal as a [`CentralRecord`] and
//! then applied; replaying the journal through [`CentralState::apply`]
//! reproduces the same state, audit trail and feed cursors.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::mem;

use chrono::{DateTime, NaiveDate, Utc};
use rollcall_core::{
    ActorRef, AttendanceEvent, AuditAction, AuditEntry, CardChange, CardState, CardTable, CardUid, DomainError,
    EventId, RfidCard, Role, Roster, StudentCode, StudentRecord, TimeWindowPolicy,
};
use rollcall_core::sync::RosterDelta;
use serde::{Deserialize, Serialize};

use crate::auth::PasswordHash;

/// Feed entries kept for reconnecting clients.
pub const FEED_RETENTION: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub username: String,
    pub role: Role,
    pub password: PasswordHash,
    #[serde(default)]
    pub student: Option<StudentCode>,
    #[serde(default)]
    pub sections: Vec<(u8, char)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum CentralRecord {
    User { user: UserRecord, audit: AuditEntry },
    Student { student: StudentRecord, audit: AuditEntry },
    Enroll { uid: CardUid, student: StudentCode, actor: String, role: Role, at: DateTime<Utc> },
    CardState { uid: CardUid, state: CardState, actor: String, role: Role, at: DateTime<Utc> },
    Mark { event: AttendanceEvent, audit: AuditEntry },
    Push { node: String, first: u64, last: u64, events: Vec<AttendanceEvent>, at: DateTime<Utc> },
    Audit { audit: AuditEntry },
}

/// Every version received for one (day, student).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    /// Earliest independent record (ties broken by lowest event id).
    pub base: AttendanceEvent,
    /// Corrections chained on top of `base`, oldest first.
    pub overrides: Vec<AttendanceEvent>,
    /// Records that lost a conflict or whose base was replaced.
    pub losers: Vec<AttendanceEvent>,
}

impl Slot {
    pub fn effective(&self) -> &AttendanceEvent {
        self.overrides.last().unwrap_or(&self.base)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Disposition {
    Duplicate,
    New,
    Override,
    /// The new record predates the old base, which lost.
    ReplacesBase { loser: EventId },
    /// An earlier record already holds the slot.
    Loses { winner: EventId },
}

fn precedes(a: &AttendanceEvent, b: &AttendanceEvent) -> bool {
    (a.recorded_at, a.event_id) < (b.recorded_at, b.event_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PushOutcome {
    pub accepted_high_water: u64,
    pub accepted: u64,
    pub duplicates: u64,
    pub conflicts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedItem {
    pub cursor: u64,
    pub event: AttendanceEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum RosterItem {
    Student,
    Card,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Applied {
    Nothing,
    Card(CardChange),
    Push(PushOutcome),
}

#[derive(Debug, Default)]
pub struct CentralState {
    pub users: BTreeMap<String, UserRecord>,
    pub roster: Roster,
    pub cards: CardTable,
    roster_version: u64,
    roster_log: Vec<(u64, RosterItem, String)>,
    slots: BTreeMap<NaiveDate, BTreeMap<StudentCode, Slot>>,
    known: HashMap<EventId, (NaiveDate, StudentCode)>,
    high_water: BTreeMap<String, u64>,
    audit: Vec<AuditEntry>,
    feed: VecDeque<FeedItem>,
    feed_head: u64,
}

impl CentralState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies a journaled record. Records are validated before they are
    /// written, so failures here mean the journal does not match the code.
    pub fn apply(&mut self, rec: CentralRecord) -> Result<Applied, DomainError> {
        match rec {
            CentralRecord::User { user, audit } => {
                self.users.insert(user.username.clone(), user);
                self.audit.push(audit);
                Ok(Applied::Nothing)
            }
            CentralRecord::Student { student, audit } => {
                self.bump(RosterItem::Student, student.student_code.to_string());
                self.roster.upsert(student);
                self.audit.push(audit);
                Ok(Applied::Nothing)
            }
            CentralRecord::Enroll { uid, student, actor, role, at } => {
                let change = self
                    .cards
                    .enroll_card(uid, &student, &self.roster, &ActorRef::new(actor, role), at)?;
                self.card_changed(&change);
                Ok(Applied::Card(change))
            }
            CentralRecord::CardState { uid, state, actor, role, at } => {
                let change = self.cards.set_card_state(uid, state, &ActorRef::new(actor, role), at)?;
                self.card_changed(&change);
                Ok(Applied::Card(change))
            }
            CentralRecord::Mark { event, audit } => {
                self.admit(event);
                self.audit.push(audit);
                Ok(Applied::Nothing)
            }
            CentralRecord::Push { node, first, last, events, at } => Ok(Applied::Push(self.push(node, first, last, events, at))),
            CentralRecord::Audit { audit } => {
                self.audit.push(audit);
                Ok(Applied::Nothing)
            }
        }
    }

    fn card_changed(&mut self, change: &CardChange) {
        if change.changed {
            self.bump(RosterItem::Card, change.card.uid.to_string());
            for d in &change.displaced {
                self.bump(RosterItem::Card, d.uid.to_string());
            }
        }
        self.audit.push(change.audit.clone());
    }

    fn bump(&mut self, item: RosterItem, key: String) {
        self.roster_version += 1;
        self.roster_log.push((self.roster_version, item, key));
    }

    fn push(&mut self, node: String, first: u64, last: u64, events: Vec<AttendanceEvent>, at: DateTime<Utc>) -> PushOutcome {
        let (mut accepted, mut duplicates, mut conflicts) = (0, 0, 0);
        let mut lost = Vec::new();
        for e in events {
            let id = e.event_id;
            match self.admit(e) {
                Disposition::Duplicate => duplicates += 1,
                Disposition::New | Disposition::Override => accepted += 1,
                Disposition::ReplacesBase { loser } => {
                    accepted += 1;
                    conflicts += 1;
                    lost.push(format!("{loser} lost to {id}"));
                }
                Disposition::Loses { winner } => {
                    conflicts += 1;
                    lost.push(format!("{id} lost to {winner}"));
                }
            }
        }
        let hw = self.high_water.entry(node.clone()).or_insert(0);
        *hw = (*hw).max(last);
        let mut detail = format!("sequences {first}..{last}: accepted {accepted}, duplicates {duplicates}, conflicts {conflicts}");
        for l in lost {
            detail.push_str("; ");
            detail.push_str(&l);
        }
        self.audit
            .push(AuditEntry::new(at, format!("edge:{node}"), AuditAction::SyncPush, node, detail));
        PushOutcome {
            accepted_high_water: *hw,
            accepted,
            duplicates,
            conflicts,
        }
    }

    /// What admitting `e` would do, without doing it.
    pub fn disposition(&self, e: &AttendanceEvent) -> Disposition {
        if self.known.contains_key(&e.event_id) {
            return Disposition::Duplicate;
        }
        match self.slot(e.school_day, &e.student_code) {
            None => Disposition::New,
            Some(slot) if e.supersedes == Some(slot.effective().event_id) => Disposition::Override,
            Some(slot) if precedes(e, &slot.base) => Disposition::ReplacesBase {
                loser: slot.base.event_id,
            },
            Some(slot) => Disposition::Loses {
                winner: slot.base.event_id,
            },
        }
    }

    fn admit(&mut self, e: AttendanceEvent) -> Disposition {
        let d = self.disposition(&e);
        if d == Disposition::Duplicate {
            return d;
        }
        let key = (e.school_day, e.student_code.clone());
        self.known.insert(e.event_id, key.clone());
        match &d {
            Disposition::New => {
                self.publish(e.clone());
                self.slots.entry(key.0).or_default().insert(
                    key.1,
                    Slot {
                        base: e,
                        overrides: Vec::new(),
                        losers: Vec::new(),
                    },
                );
            }
            Disposition::Override => {
                self.publish(e.clone());
                self.slot_mut(&key).overrides.push(e);
            }
            Disposition::ReplacesBase { .. } => {
                self.publish(e.clone());
                let slot = self.slot_mut(&key);
                let old = mem::replace(&mut slot.base, e);
                // Corrections applied to the displaced record go with it.
                let orphans = mem::take(&mut slot.overrides);
                slot.losers.push(old);
                slot.losers.extend(orphans);
            }
            Disposition::Loses { .. } => self.slot_mut(&key).losers.push(e),
            Disposition::Duplicate => unreachable!(),
        }
        d
    }

    fn publish(&mut self, event: AttendanceEvent) {
        self.feed_head += 1;
        self.feed.push_back(FeedItem {
            cursor: self.feed_head,
            event,
        });
        if self.feed.len() > FEED_RETENTION {
            self.feed.pop_front();
        }
    }

    fn slot_mut(&mut self, key: &(NaiveDate, StudentCode)) -> &mut Slot {
        self.slots.get_mut(&key.0).and_then(|d| d.get_mut(&key.1)).expect("slot")
    }

    pub fn effective(&self, day: NaiveDate, student: &StudentCode) -> Option<&AttendanceEvent> {
        self.slot(day, student).map(Slot::effective)
    }

    pub fn slot(&self, day: NaiveDate, student: &StudentCode) -> Option<&Slot> {
        self.slots.get(&day).and_then(|d| d.get(student))
    }

    /// Effective records of one day, ordered by student code.
    pub fn day(&self, day: NaiveDate) -> impl Iterator<Item = &AttendanceEvent> {
        self.slots.get(&day).into_iter().flat_map(|d| d.values().map(Slot::effective))
    }

    /// Effective records with `from <= day <= to`, ordered by (day, student).
    pub fn effective_range(&self, from: NaiveDate, to: NaiveDate) -> impl Iterator<Item = &AttendanceEvent> {
        let range = if from <= to { Some(from..=to) } else { None };
        range
            .into_iter()
            .flat_map(move |r| self.slots.range(r))
            .flat_map(|(_, d)| d.values().map(Slot::effective))
    }

    pub fn contains_event(&self, id: &EventId) -> bool {
        self.known.contains_key(id)
    }

    /// Every event id received, effective or not.
    pub fn event_ids(&self) -> impl Iterator<Item = &EventId> {
        self.known.keys()
    }

    /// A day is closed once its closure instant has passed and every active
    /// student has a record for it.
    pub fn is_closed(&self, day: NaiveDate, policy: &TimeWindowPolicy, now: DateTime<Utc>) -> bool {
        policy.is_school_day(day)
            && policy.closure_instant(day) <= now
            && self.roster.active().all(|s| self.slot(day, &s.student_code).is_some())
    }

    pub fn high_water(&self, node: &str) -> u64 {
        self.high_water.get(node).copied().unwrap_or(0)
    }

    pub fn roster_version(&self) -> u64 {
        self.roster_version
    }

    /// Current students and cards changed after `since`.
    pub fn roster_delta(&self, since: u64) -> RosterDelta {
        let start = self.roster_log.partition_point(|(v, _, _)| *v <= since);
        let mut students = BTreeMap::new();
        let mut cards = BTreeMap::new();
        for (_, item, key) in &self.roster_log[start..] {
            match item {
                RosterItem::Student => {
                    let code: StudentCode = key.parse().expect("logged code");
                    if let Some(s) = self.roster.get(&code) {
                        students.insert(code, s.clone());
                    }
                }
                RosterItem::Card => {
                    let uid: CardUid = key.parse().expect("logged uid");
                    if let Some(c) = self.cards.get(&uid) {
                        cards.insert(uid, c.clone());
                    }
                }
            }
        }
        RosterDelta {
            version: self.roster_version,
            students: students.into_values().collect(),
            cards: cards.into_values().collect::<Vec<RfidCard>>(),
        }
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn feed_head(&self) -> u64 {
        self.feed_head
    }

    /// Oldest cursor still replayable: feed items after `cursor` are all
    /// retained iff `cursor >= feed_floor()`.
    pub fn feed_floor(&self) -> u64 {
        self.feed.front().map_or(self.feed_head, |f| f.cursor - 1)
    }

    pub fn feed_after(&self, cursor: u64) -> impl Iterator<Item = &FeedItem> {
        let skip = cursor.saturating_sub(self.feed_floor()) as usize;
        self.feed.iter().skip(skip)
    }
}
