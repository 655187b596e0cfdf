//! Wire types shared by the edge sync client and the central sync endpoints.

use std::fmt::Write as _;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AttendanceEvent, RfidCard, StudentRecord};

/// Largest number of events one batch may carry.
pub const MAX_BATCH_EVENTS: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BatchError {
    #[error("checksum mismatch: batch says {claimed:08x}, content hashes to {actual:08x}")]
    ChecksumMismatch { claimed: u32, actual: u32 },
    #[error("event sequences are not contiguous from {first} to {last}")]
    NotContiguous { first: u64, last: u64 },
    #[error("batch carries {0} events, limit is {MAX_BATCH_EVENTS}")]
    TooLarge(usize),
}

/// A contiguous run of edge-log events. An empty batch has
/// `first_sequence = high_water + 1` and `last_sequence = high_water`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncBatch {
    pub edge_node_id: String,
    pub first_sequence: u64,
    pub last_sequence: u64,
    pub events: Vec<AttendanceEvent>,
    pub checksum: u32,
}

impl SyncBatch {
    /// Wraps events (already in sequence order) starting at `first_sequence`.
    pub fn new(edge_node_id: impl Into<String>, first_sequence: u64, events: Vec<AttendanceEvent>) -> Self {
        let edge_node_id = edge_node_id.into();
        let last_sequence = (first_sequence + events.len() as u64).saturating_sub(1);
        let checksum = batch_checksum(&edge_node_id, first_sequence, last_sequence, &events);
        SyncBatch {
            edge_node_id,
            first_sequence,
            last_sequence,
            events,
            checksum,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn verify(&self) -> Result<(), BatchError> {
        if self.events.len() > MAX_BATCH_EVENTS {
            return Err(BatchError::TooLarge(self.events.len()));
        }
        let contiguous = self.first_sequence >= 1
            && self.last_sequence + 1 == self.first_sequence + self.events.len() as u64
            && self
                .events
                .iter()
                .enumerate()
                .all(|(i, e)| e.edge_sequence == self.first_sequence + i as u64);
        if !contiguous {
            return Err(BatchError::NotContiguous {
                first: self.first_sequence,
                last: self.last_sequence,
            });
        }
        let actual = batch_checksum(&self.edge_node_id, self.first_sequence, self.last_sequence, &self.events);
        if actual != self.checksum {
            return Err(BatchError::ChecksumMismatch {
                claimed: self.checksum,
                actual,
            });
        }
        Ok(())
    }
}

fn ts(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Canonical byte form hashed by the batch checksum: a version line, the
/// node id, both sequence bounds, then one `|`-separated line per event with
/// fields in fixed order and timestamps as RFC 3339 UTC.
pub fn canonical_bytes(edge_node_id: &str, first: u64, last: u64, events: &[AttendanceEvent]) -> Vec<u8> {
    let mut s = String::with_capacity(64 + events.len() * 160);
    let _ = write!(s, "rollcall-batch-v1\n{edge_node_id}\n{first}\n{last}\n");
    for e in events {
        let _ = writeln!(
            s,
            "{}|{}|{}|{}|{}|{}|{}|{}|{}",
            e.event_id,
            e.student_code,
            e.school_day.format("%Y-%m-%d"),
            e.status,
            ts(&e.recorded_at),
            e.method,
            e.recorded_by.as_deref().unwrap_or(""),
            e.edge_sequence,
            e.supersedes.map(|id| id.to_string()).unwrap_or_default(),
        );
    }
    s.into_bytes()
}

/// CRC-32 (IEEE) of [`canonical_bytes`].
pub fn batch_checksum(edge_node_id: &str, first: u64, last: u64, events: &[AttendanceEvent]) -> u32 {
    crc32fast::hash(&canonical_bytes(edge_node_id, first, last, events))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRequest {
    pub node_id: String,
    pub secret: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub token: String,
    pub node_id: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushResponse {
    pub accepted_high_water: u64,
    /// Events whose `event_id` central already had.
    pub duplicates: u64,
    /// Events that lost a (student, day) conflict to an earlier record.
    pub conflicts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RosterDelta {
    pub version: u64,
    pub students: Vec<StudentRecord>,
    pub cards: Vec<RfidCard>,
}

impl RosterDelta {
    pub fn is_empty(&self) -> bool {
        self.students.is_empty() && self.cards.is_empty()
    }
}

/// Error body returned by every API endpoint on failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_water: Option<u64>,
}
