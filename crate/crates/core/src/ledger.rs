//! Current attendance state: at most one live event per (student, day).

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use thiserror::Error;

use crate::domain::{AttendanceEvent, StudentCode};
use crate::ids::EventId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("{student} already has an attendance record on {day}")]
    UniquenessViolation { student: StudentCode, day: NaiveDate },
    #[error("event supersedes {claimed} but the current version is {current}")]
    StaleSupersede { claimed: EventId, current: EventId },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttendanceLedger {
    current: BTreeMap<(NaiveDate, StudentCode), AttendanceEvent>,
    closed: BTreeSet<NaiveDate>,
}

impl AttendanceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checks whether `event` may be inserted without changing anything.
    pub fn check(&self, event: &AttendanceEvent) -> Result<(), LedgerError> {
        let key = (event.school_day, event.student_code.clone());
        match (self.current.get(&key), event.supersedes) {
            (None, _) => Ok(()),
            (Some(cur), Some(prev)) if cur.event_id == prev => Ok(()),
            (Some(cur), Some(prev)) => Err(LedgerError::StaleSupersede {
                claimed: prev,
                current: cur.event_id,
            }),
            (Some(_), None) => Err(LedgerError::UniquenessViolation {
                student: event.student_code.clone(),
                day: event.school_day,
            }),
        }
    }

    /// Inserts a first event for its (student, day), or a new version that
    /// supersedes the current one. Returns the replaced version.
    pub fn insert(&mut self, event: AttendanceEvent) -> Result<Option<AttendanceEvent>, LedgerError> {
        self.check(&event)?;
        Ok(self
            .current
            .insert((event.school_day, event.student_code.clone()), event))
    }

    pub fn get(&self, student: &StudentCode, day: NaiveDate) -> Option<&AttendanceEvent> {
        self.current.get(&(day, student.clone()))
    }

    /// Events of one day in student-code order.
    pub fn day(&self, day: NaiveDate) -> impl Iterator<Item = &AttendanceEvent> {
        self.current
            .range((day, min_code())..)
            .take_while(move |((d, _), _)| *d == day)
            .map(|(_, e)| e)
    }

    /// All current events ordered by (day, student_code).
    pub fn iter(&self) -> impl Iterator<Item = &AttendanceEvent> {
        self.current.values()
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn mark_closed(&mut self, day: NaiveDate) -> bool {
        self.closed.insert(day)
    }

    pub fn is_closed(&self, day: NaiveDate) -> bool {
        self.closed.contains(&day)
    }

    pub fn closed_days(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.closed.iter().copied()
    }
}

fn min_code() -> StudentCode {
    "0000-1A-001".parse().expect("valid")
}
