//! Request and response bodies of the HTTP API. Field names are part of the
//! public contract.

use chrono::{DateTime, NaiveDate, Utc};
use rollcall_core::reports::{ChronicFlag, StatusCounts};
use rollcall_core::{AttendanceEvent, AttendanceStatus, AuditAction, AuditEntry, CardState, CardUid, RfidCard, Role, StudentCode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginRequest {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginResponse {
    pub token: String,
    pub username: String,
    pub role: Role,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateUserRequest {
    pub username: String,
    pub password: String,
    pub role: Role,
    /// Required for the student role.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_code: Option<StudentCode>,
    /// Teacher assignments such as `"3B"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sections: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserView {
    pub username: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_code: Option<StudentCode>,
    #[serde(default)]
    pub sections: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentsQuery {
    pub grade: Option<u8>,
    pub section: Option<char>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardsQuery {
    pub student: Option<StudentCode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollCardRequest {
    pub uid: CardUid,
    pub student_code: StudentCode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetCardStateRequest {
    pub state: CardState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardChangeResponse {
    pub card: RfidCard,
    /// Other cards of the student blocked by this change.
    pub displaced: Vec<RfidCard>,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualMarkRequest {
    pub student_code: StudentCode,
    pub school_day: NaiveDate,
    pub status: AttendanceStatus,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JustifyRequest {
    pub student_code: StudentCode,
    pub school_day: NaiveDate,
    #[serde(default)]
    pub note: String,
}

/// Filter for attendance queries and CSV export. `from` and `to` default to
/// today; `offset`/`limit` apply to queries only.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttendanceQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<char>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<StudentCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<AttendanceStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttendancePage {
    pub items: Vec<AttendanceEvent>,
    /// Size of the full filtered set.
    pub total: u64,
    /// Per-status counts over the full filtered set.
    pub counts: StatusCounts,
    pub offset: usize,
    pub limit: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day: Option<NaiveDate>,
    /// Omit for a snapshot of the day.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cursor: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveFeed {
    pub day: NaiveDate,
    /// Pass back as `cursor` to receive what follows.
    pub cursor: u64,
    pub snapshot: bool,
    /// Nothing new arrived before the wait ran out.
    pub heartbeat: bool,
    pub items: Vec<AttendanceEvent>,
}

/// `scope` is `institution` (default), `grade`, `section` or `student`;
/// `period` is `day` (default), `week`, `month` (anchored at `date`, default
/// today) or `range` (`from`..=`to`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<char>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<StudentCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChronicQuery {
    pub from: NaiveDate,
    pub to: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<char>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<StudentCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChronicReport {
    pub from: NaiveDate,
    pub to: NaiveDate,
    pub threshold: f64,
    /// One evaluation per active student in scope, by student code.
    pub students: Vec<ChronicFlag>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<AuditAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditPage {
    pub items: Vec<AuditEntry>,
    pub total: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterQuery {
    #[serde(default)]
    pub since: u64,
}

pub fn format_section(grade: u8, section: char) -> String {
    format!("{grade}{section}")
}

/// Parses `"3B"` into (3, 'B').
pub fn parse_section(s: &str) -> Option<(u8, char)> {
    let mut chars = s.chars();
    let g = chars.next()?.to_digit(10)?;
    let sec = chars.next()?;
    if chars.next().is_some() || !(1..=9).contains(&g) || !sec.is_ascii_uppercase() {
        return None;
    }
    Some((g as u8, sec))
}
