//! Roles, API endpoints and the permission matrix between them.
//!
//! Every HTTP route is an [`Endpoint`]; a route that is not listed here is
//! never mounted, so it is unreachable for every role.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Admin,
    Auxiliary,
    Teacher,
    Student,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Admin, Role::Auxiliary, Role::Teacher, Role::Student];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Admin => "admin",
            Role::Auxiliary => "auxiliary",
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

/// Who may call an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    /// No token required (credential exchange endpoints).
    Public,
    /// Requires a sync token bound to an edge node.
    EdgeNode,
    /// Requires a user session with one of these roles.
    Roles(&'static [Role]),
}

const ADMIN: &[Role] = &[Role::Admin];
const MANAGERS: &[Role] = &[Role::Admin, Role::Auxiliary];
const STAFF: &[Role] = &[Role::Admin, Role::Auxiliary, Role::Teacher];
const EVERYONE: &[Role] = &[Role::Admin, Role::Auxiliary, Role::Teacher, Role::Student];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Login,
    IssueSyncToken,
    CreateUser,
    ListStudents,
    CreateStudent,
    ListCards,
    EnrollCard,
    SetCardState,
    QueryAttendance,
    ManualMark,
    Justify,
    LiveFeed,
    ReportSummary,
    ReportExport,
    ReportChronic,
    AuditLog,
    SyncEvents,
    SyncRoster,
}

impl Endpoint {
    pub const ALL: [Endpoint; 18] = [
        Endpoint::Login,
        Endpoint::IssueSyncToken,
        Endpoint::CreateUser,
        Endpoint::ListStudents,
        Endpoint::CreateStudent,
        Endpoint::ListCards,
        Endpoint::EnrollCard,
        Endpoint::SetCardState,
        Endpoint::QueryAttendance,
        Endpoint::ManualMark,
        Endpoint::Justify,
        Endpoint::LiveFeed,
        Endpoint::ReportSummary,
        Endpoint::ReportExport,
        Endpoint::ReportChronic,
        Endpoint::AuditLog,
        Endpoint::SyncEvents,
        Endpoint::SyncRoster,
    ];

    pub fn method(&self) -> &'static str {
        use Endpoint::*;
        match self {
            ListStudents | ListCards | QueryAttendance | LiveFeed | ReportSummary | ReportExport
            | ReportChronic | AuditLog | SyncRoster => "GET",
            _ => "POST",
        }
    }

    /// Route template; `{uid}` is a path parameter.
    pub fn path(&self) -> &'static str {
        use Endpoint::*;
        match self {
            Login => "/api/v1/auth/login",
            IssueSyncToken => "/api/v1/auth/token",
            CreateUser => "/api/v1/users",
            ListStudents | CreateStudent => "/api/v1/students",
            ListCards | EnrollCard => "/api/v1/cards",
            SetCardState => "/api/v1/cards/{uid}/state",
            QueryAttendance => "/api/v1/attendance",
            ManualMark => "/api/v1/attendance/manual",
            Justify => "/api/v1/attendance/justify",
            LiveFeed => "/api/v1/attendance/live",
            ReportSummary => "/api/v1/reports/summary",
            ReportExport => "/api/v1/reports/export.csv",
            ReportChronic => "/api/v1/reports/chronic",
            AuditLog => "/api/v1/audit",
            SyncEvents => "/api/v1/sync/events",
            SyncRoster => "/api/v1/sync/roster",
        }
    }

    pub fn access(&self) -> Access {
        use Endpoint::*;
        match self {
            Login | IssueSyncToken => Access::Public,
            SyncEvents | SyncRoster => Access::EdgeNode,
            CreateUser | CreateStudent | AuditLog => Access::Roles(ADMIN),
            ListCards | EnrollCard | SetCardState | ManualMark | Justify => Access::Roles(MANAGERS),
            ListStudents | LiveFeed | ReportSummary | ReportExport | ReportChronic => Access::Roles(STAFF),
            QueryAttendance => Access::Roles(EVERYONE),
        }
    }

    /// True if the endpoint changes state (and so writes an audit entry).
    pub fn is_mutating(&self) -> bool {
        use Endpoint::*;
        matches!(
            self,
            CreateUser | CreateStudent | EnrollCard | SetCardState | ManualMark | Justify | SyncEvents
        )
    }
}

/// Whether a user session with `role` may call `endpoint`. Sync endpoints are
/// reserved for edge-node tokens and are denied to every human role.
pub fn role_allowed(role: Role, endpoint: Endpoint) -> bool {
    match endpoint.access() {
        Access::Public => true,
        Access::EdgeNode => false,
        Access::Roles(roles) => roles.contains(&role),
    }
}
