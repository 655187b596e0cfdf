//! Core model and logic of the rollcall attendance platform.
//!
//! Everything here is synchronous and free of I/O except [`journal`], the
//! append-only record file both nodes persist through. Time always comes in
//! as an argument or through a [`clock::Clock`].

pub mod clock;
pub mod config;
pub mod domain;
pub mod engine;
pub mod ids;
pub mod journal;
pub mod ledger;
pub mod policy;
pub mod rbac;
pub mod reports;
pub mod sync;

pub use domain::{
    ActorRef, AttendanceEvent, AttendanceStatus, AuditAction, AuditEntry, CaptureMethod, CardChange, CardState, CardTable,
    CardUid, DomainError, NewStudent, RfidCard, Roster, StudentCode, StudentRecord,
};
pub use engine::{classify, AttendanceEngine, EngineError, RejectReason, ScanDecision, ScanOutcome, WindowSlot};
pub use ids::{EventId, IdSource, RandomIds, SeededIds};
pub use ledger::{AttendanceLedger, LedgerError};
pub use policy::{SchoolCalendar, TimeWindowPolicy};
pub use rbac::{Endpoint, Role};
