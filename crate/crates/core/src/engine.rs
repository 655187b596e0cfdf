//! Scan classification, daily uniqueness, closure and corrections.
//!
//! The engine is pure: it reads the card table, roster and ledger, and
//! returns the event (if any) and audit entry the caller must commit. Time
//! is always passed in.

use std::fmt;

use chrono::{DateTime, NaiveDate, NaiveTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    ActorRef, AttendanceEvent, AttendanceStatus, AuditAction, AuditEntry, CaptureMethod, CardState, CardTable,
    CardUid, Roster, StudentCode,
};
use crate::ids::IdSource;
use crate::ledger::AttendanceLedger;
use crate::policy::TimeWindowPolicy;
use crate::rbac::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WindowSlot {
    BeforeWindow,
    Present,
    Late,
    AfterClosure,
}

/// Maps a local time of day onto the policy's four half-open ranges.
pub fn classify(policy: &TimeWindowPolicy, t: NaiveTime) -> WindowSlot {
    if t < policy.present_start() {
        WindowSlot::BeforeWindow
    } else if t < policy.late_start() {
        WindowSlot::Present
    } else if t < policy.closure() {
        WindowSlot::Late
    } else {
        WindowSlot::AfterClosure
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BeforeWindow,
    AfterClosure,
    CardBlocked,
    UnknownCard,
    UnlinkedCard,
    NonSchoolDay,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::BeforeWindow => "before_window",
            RejectReason::AfterClosure => "after_closure",
            RejectReason::CardBlocked => "card_blocked",
            RejectReason::UnknownCard => "unknown_card",
            RejectReason::UnlinkedCard => "unlinked_card",
            RejectReason::NonSchoolDay => "non_school_day",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ScanOutcome {
    Recorded(AttendanceStatus),
    Duplicate(AttendanceStatus),
    Rejected(RejectReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanDecision {
    pub outcome: ScanOutcome,
    /// Present only for `Recorded`.
    pub event: Option<AttendanceEvent>,
    pub audit: AuditEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("closure for {0} already ran")]
    ClosureAlreadyRan(NaiveDate),
    #[error("{0} is not a school day")]
    NonSchoolDay(NaiveDate),
    #[error("closure for {0} is not due yet")]
    ClosureNotDue(NaiveDate),
    #[error("no attendance record for {student} on {day}")]
    NoRecord { student: StudentCode, day: NaiveDate },
    #[error("only absences can be justified (record is {0})")]
    NotAbsent(AttendanceStatus),
    #[error("role {0} may not change attendance records")]
    Forbidden(Role),
    #[error("{0} is in the future")]
    FutureDate(NaiveDate),
    #[error("manual marks must be present, late or absent")]
    InvalidManualStatus,
    #[error("unknown student {0}")]
    UnknownStudent(StudentCode),
}

#[derive(Debug, Clone)]
pub struct AttendanceEngine {
    policy: TimeWindowPolicy,
}

fn require_marker(actor: &ActorRef) -> Result<(), EngineError> {
    match actor.role {
        Role::Admin | Role::Auxiliary => Ok(()),
        other => Err(EngineError::Forbidden(other)),
    }
}

impl AttendanceEngine {
    pub fn new(policy: TimeWindowPolicy) -> Self {
        AttendanceEngine { policy }
    }

    pub fn policy(&self) -> &TimeWindowPolicy {
        &self.policy
    }

    /// Decides what a card scan at `now` means. Every path yields exactly one
    /// audit entry; only a first in-window scan yields an event.
    #[allow(clippy::too_many_arguments)]
    pub fn process_scan(
        &self,
        uid: CardUid,
        now: DateTime<Utc>,
        reader_node: &str,
        cards: &CardTable,
        roster: &Roster,
        ledger: &AttendanceLedger,
        ids: &mut dyn IdSource,
    ) -> ScanDecision {
        let actor = format!("reader:{reader_node}");
        let reject = |reason: RejectReason, who: Option<&StudentCode>| {
            let detail = match who {
                Some(s) => format!("rejected {reason} student={s}"),
                None => format!("rejected {reason}"),
            };
            ScanDecision {
                outcome: ScanOutcome::Rejected(reason),
                event: None,
                audit: AuditEntry::new(now, &actor, AuditAction::Scan, uid.to_string(), detail),
            }
        };

        let Some(card) = cards.get(&uid) else {
            return reject(RejectReason::UnknownCard, None);
        };
        let student = match (&card.linked_student, card.state) {
            (_, CardState::Blocked) => return reject(RejectReason::CardBlocked, card.linked_student.as_ref()),
            (Some(s), CardState::Active) if roster.is_active(s) => s,
            (other, CardState::Active) => return reject(RejectReason::UnlinkedCard, other.as_ref()),
        };

        let local = self.policy.local(now);
        let day = local.date();
        if !self.policy.is_school_day(day) {
            return reject(RejectReason::NonSchoolDay, Some(student));
        }
        let status = match classify(&self.policy, local.time()) {
            WindowSlot::BeforeWindow => return reject(RejectReason::BeforeWindow, Some(student)),
            WindowSlot::AfterClosure => return reject(RejectReason::AfterClosure, Some(student)),
            WindowSlot::Present => AttendanceStatus::Present,
            WindowSlot::Late => AttendanceStatus::Late,
        };

        if let Some(existing) = ledger.get(student, day) {
            return ScanDecision {
                outcome: ScanOutcome::Duplicate(existing.status),
                event: None,
                audit: AuditEntry::new(
                    now,
                    &actor,
                    AuditAction::Scan,
                    uid.to_string(),
                    format!("duplicate ({}) student={student}", existing.status),
                ),
            };
        }

        let event = AttendanceEvent {
            event_id: ids.next_id(),
            student_code: student.clone(),
            school_day: day,
            status,
            recorded_at: now,
            method: CaptureMethod::Rfid,
            recorded_by: None,
            edge_sequence: 0,
            supersedes: None,
        };
        ScanDecision {
            outcome: ScanOutcome::Recorded(status),
            audit: AuditEntry::new(
                now,
                &actor,
                AuditAction::Scan,
                uid.to_string(),
                format!("recorded {status} student={student} event={}", event.event_id),
            ),
            event: Some(event),
        }
    }

    /// Absent events for every active student without a record on `day`,
    /// stamped at the closure instant. The caller marks the day closed after
    /// committing them.
    pub fn run_closure(
        &self,
        day: NaiveDate,
        now: DateTime<Utc>,
        roster: &Roster,
        ledger: &AttendanceLedger,
        ids: &mut dyn IdSource,
    ) -> Result<Vec<AttendanceEvent>, EngineError> {
        if ledger.is_closed(day) {
            return Err(EngineError::ClosureAlreadyRan(day));
        }
        if !self.policy.is_school_day(day) {
            return Err(EngineError::NonSchoolDay(day));
        }
        let at = self.policy.closure_instant(day);
        if now < at {
            return Err(EngineError::ClosureNotDue(day));
        }
        Ok(roster
            .active()
            .filter(|s| ledger.get(&s.student_code, day).is_none())
            .map(|s| AttendanceEvent {
                event_id: ids.next_id(),
                student_code: s.student_code.clone(),
                school_day: day,
                status: AttendanceStatus::Absent,
                recorded_at: at,
                method: CaptureMethod::SystemClosure,
                recorded_by: None,
                edge_sequence: 0,
                supersedes: None,
            })
            .collect())
    }

    /// School days from `since` through today whose closure instant has
    /// passed and which are not closed yet.
    pub fn due_closures(&self, since: NaiveDate, now: DateTime<Utc>, ledger: &AttendanceLedger) -> Vec<NaiveDate> {
        let today = self.policy.local_day(now);
        self.policy
            .calendar()
            .school_days(since, today)
            .filter(|d| !ledger.is_closed(*d) && self.policy.closure_instant(*d) <= now)
            .collect()
    }

    /// Turns an absence into a justified absence. The new version supersedes
    /// the absence, which stays referenced from the audit detail.
    #[allow(clippy::too_many_arguments)]
    pub fn justify(
        &self,
        student: &StudentCode,
        day: NaiveDate,
        actor: &ActorRef,
        note: &str,
        now: DateTime<Utc>,
        ledger: &AttendanceLedger,
        ids: &mut dyn IdSource,
    ) -> Result<(AttendanceEvent, AuditEntry), EngineError> {
        require_marker(actor)?;
        let existing = ledger.get(student, day).ok_or_else(|| EngineError::NoRecord {
            student: student.clone(),
            day,
        })?;
        if existing.status != AttendanceStatus::Absent {
            return Err(EngineError::NotAbsent(existing.status));
        }
        let event = AttendanceEvent {
            event_id: ids.next_id(),
            student_code: student.clone(),
            school_day: day,
            status: AttendanceStatus::Justified,
            recorded_at: now,
            method: CaptureMethod::Manual,
            recorded_by: Some(actor.id.clone()),
            edge_sequence: 0,
            supersedes: Some(existing.event_id),
        };
        let audit = AuditEntry::new(
            now,
            &actor.id,
            AuditAction::Justify,
            format!("{student}@{day}"),
            format!(
                "supersedes {} ({} via {} at {}); note: {note}",
                existing.event_id,
                existing.status,
                existing.method,
                existing.recorded_at.to_rfc3339()
            ),
        );
        Ok((event, audit))
    }

    /// A manual present/late/absent mark, superseding any current record.
    #[allow(clippy::too_many_arguments)]
    pub fn manual_mark(
        &self,
        student: &StudentCode,
        day: NaiveDate,
        status: AttendanceStatus,
        actor: &ActorRef,
        note: &str,
        now: DateTime<Utc>,
        roster: &Roster,
        ledger: &AttendanceLedger,
        ids: &mut dyn IdSource,
    ) -> Result<(AttendanceEvent, AuditEntry), EngineError> {
        require_marker(actor)?;
        if status == AttendanceStatus::Justified {
            return Err(EngineError::InvalidManualStatus);
        }
        if roster.get(student).is_none() {
            return Err(EngineError::UnknownStudent(student.clone()));
        }
        if day > self.policy.local_day(now) {
            return Err(EngineError::FutureDate(day));
        }
        if !self.policy.is_school_day(day) {
            return Err(EngineError::NonSchoolDay(day));
        }
        let prior = ledger.get(student, day);
        let event = AttendanceEvent {
            event_id: ids.next_id(),
            student_code: student.clone(),
            school_day: day,
            status,
            recorded_at: now,
            method: CaptureMethod::Manual,
            recorded_by: Some(actor.id.clone()),
            edge_sequence: 0,
            supersedes: prior.map(|p| p.event_id),
        };
        let prior_desc = match prior {
            Some(p) => format!("prior {} ({} via {})", p.event_id, p.status, p.method),
            None => "no prior record".to_string(),
        };
        let audit = AuditEntry::new(
            now,
            &actor.id,
            AuditAction::ManualMark,
            format!("{student}@{day}"),
            format!("marked {status}; {prior_desc}; note: {note}"),
        );
        Ok((event, audit))
    }
}
