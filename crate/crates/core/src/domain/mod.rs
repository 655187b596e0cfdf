//! Shared data model: students, RFID cards, attendance events and audit entries.

mod cards;
mod code;
mod roster;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::EventId;
use crate::rbac::Role;

pub use cards::{CardChange, CardTable};
pub use code::{generate_student_code, StudentCode};
pub use roster::{NewStudent, Roster};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("grade must be 1-5 and section A-Z")]
    InvalidGradeOrSection,
    #[error("enrollment year {0} is not a four-digit year")]
    InvalidYear(i32),
    #[error("all 999 codes for prefix {0} are taken")]
    CapacityExhausted(String),
    #[error("malformed student code {0:?}")]
    InvalidStudentCode(String),
    #[error("malformed card uid {0:?}: expected 8 hex characters")]
    InvalidUid(String),
    #[error("card {uid} is already active for student {student}")]
    DuplicateUid { uid: CardUid, student: StudentCode },
    #[error("unknown student {0}")]
    UnknownStudent(StudentCode),
    #[error("student {0} is not active")]
    InactiveStudent(StudentCode),
    #[error("unknown card {0}")]
    UnknownCard(CardUid),
    #[error("role {role} may not {action}")]
    Forbidden { role: Role, action: &'static str },
    #[error("invalid attendance event: {0}")]
    InvalidEvent(&'static str),
}

/// Four-byte card identifier. Canonical text form is 8 uppercase hex
/// characters, most-significant byte first.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CardUid([u8; 4]);

impl CardUid {
    pub const fn from_bytes(bytes: [u8; 4]) -> Self {
        CardUid(bytes)
    }

    pub fn bytes(&self) -> [u8; 4] {
        self.0
    }
}

impl fmt::Display for CardUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02X}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for CardUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CardUid({self})")
    }
}

impl FromStr for CardUid {
    type Err = DomainError;

    /// Accepts either case; the result is canonical.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DomainError::InvalidUid(s.to_string());
        if s.len() != 8 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(bad());
        }
        let mut out = [0u8; 4];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        Ok(CardUid(out))
    }
}

impl Serialize for CardUid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CardUid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub student_code: StudentCode,
    pub given_names: String,
    pub family_names: String,
    pub enrollment_year: i32,
    pub grade: u8,
    pub section: char,
    #[serde(default)]
    pub emergency_contact: String,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardState {
    Active,
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfidCard {
    pub uid: CardUid,
    pub state: CardState,
    pub linked_student: Option<StudentCode>,
    pub issued_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttendanceStatus {
    Present,
    Late,
    Absent,
    Justified,
}

impl AttendanceStatus {
    pub const ALL: [AttendanceStatus; 4] = [
        AttendanceStatus::Present,
        AttendanceStatus::Late,
        AttendanceStatus::Absent,
        AttendanceStatus::Justified,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttendanceStatus::Present => "present",
            AttendanceStatus::Late => "late",
            AttendanceStatus::Absent => "absent",
            AttendanceStatus::Justified => "justified",
        }
    }
}

impl fmt::Display for AttendanceStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttendanceStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttendanceStatus::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown attendance status {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureMethod {
    Rfid,
    Manual,
    SystemClosure,
}

impl CaptureMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaptureMethod::Rfid => "rfid",
            CaptureMethod::Manual => "manual",
            CaptureMethod::SystemClosure => "system_closure",
        }
    }
}

impl fmt::Display for CaptureMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One attendance fact for a student on a school day.
///
/// Corrections (manual re-marks, justifications) never edit an event in
/// place: they are new events whose `supersedes` names the version they
/// replace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttendanceEvent {
    pub event_id: EventId,
    pub student_code: StudentCode,
    pub school_day: NaiveDate,
    pub status: AttendanceStatus,
    pub recorded_at: DateTime<Utc>,
    pub method: CaptureMethod,
    pub recorded_by: Option<String>,
    /// Position in the originating edge log; 0 for events created centrally.
    pub edge_sequence: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<EventId>,
}

impl AttendanceEvent {
    /// Checks the status/method pairing rules.
    pub fn validate(&self) -> Result<(), DomainError> {
        use AttendanceStatus::*;
        use CaptureMethod::*;
        match (self.method, self.status) {
            (Rfid, Present | Late) => {}
            (Rfid, _) => return Err(DomainError::InvalidEvent("rfid events are present or late")),
            (SystemClosure, Absent) => {}
            (SystemClosure, _) => return Err(DomainError::InvalidEvent("closure events are absent")),
            (Manual, _) => {
                if self.recorded_by.as_deref().is_none_or(str::is_empty) {
                    return Err(DomainError::InvalidEvent("manual events need recorded_by"));
                }
            }
        }
        if self.status == Justified && self.method != Manual {
            return Err(DomainError::InvalidEvent("justified events are manual"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Scan,
    Enroll,
    Block,
    Unblock,
    ManualMark,
    Justify,
    SyncPush,
    LoginFail,
    CreateStudent,
    CreateUser,
    Denied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at: DateTime<Utc>,
    pub actor: String,
    pub action: AuditAction,
    pub subject: String,
    pub detail: String,
}

impl AuditEntry {
    pub fn new(
        at: DateTime<Utc>,
        actor: impl Into<String>,
        action: AuditAction,
        subject: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        AuditEntry {
            at,
            actor: actor.into(),
            action,
            subject: subject.into(),
            detail: detail.into(),
        }
    }
}

/// Identity of whoever performs a management operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActorRef {
    pub id: String,
    pub role: Role,
}

impl ActorRef {
    pub fn new(id: impl Into<String>, role: Role) -> Self {
        ActorRef { id: id.into(), role }
    }
}
