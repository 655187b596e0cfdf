#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, TimeZone, Utc};
use rollcall_core::clock::Clock;
use rollcall_core::{CardState, CardUid, NewStudent, RfidCard, Roster, SeededIds, StudentRecord, TimeWindowPolicy};
use rollcall_edge::{EdgeNode, EdgeStore};

pub fn monday() -> NaiveDate {
    NaiveDate::from_ymd_opt(2025, 3, 10).unwrap()
}

pub fn at(day: NaiveDate, h: u32, m: u32, s: u32) -> DateTime<Utc> {
    TimeWindowPolicy::default().instant(day, NaiveTime::from_hms_opt(h, m, s).unwrap())
}

pub fn uid(i: usize) -> CardUid {
    CardUid::from_bytes([0x04, (i >> 16) as u8, (i >> 8) as u8, i as u8])
}

/// `n` students in grade 1 section A, student i holding card `uid(i)`.
pub fn roster(n: usize) -> (Vec<StudentRecord>, Vec<RfidCard>) {
    let mut r = Roster::new();
    let mut cards = Vec::new();
    for i in 0..n {
        let s = r
            .add(NewStudent {
                enrollment_year: 2025,
                grade: 1,
                section: 'A',
                given_names: format!("Given{i}"),
                family_names: format!("Family{i}"),
                emergency_contact: String::new(),
            })
            .unwrap();
        cards.push(RfidCard {
            uid: uid(i),
            state: CardState::Active,
            linked_student: Some(s.student_code),
            issued_at: Utc.with_ymd_and_hms(2025, 3, 1, 0, 0, 0).unwrap(),
        });
    }
    (r.iter().cloned().collect(), cards)
}

/// Each reading is one second after the previous one.
pub struct TickClock {
    next: AtomicI64,
}

impl TickClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        TickClock {
            next: AtomicI64::new(start.timestamp()),
        }
    }
}

impl Clock for TickClock {
    fn now(&self) -> DateTime<Utc> {
        Utc.timestamp_opt(self.next.fetch_add(1, Ordering::SeqCst), 0).unwrap()
    }
}

pub fn start_node(dir: &Path, clock: Arc<dyn Clock>, students: usize) -> EdgeNode {
    let mut store = EdgeStore::open(&dir.join("edge.log"), "gate-1", monday(), Default::default()).unwrap();
    let (s, c) = roster(students);
    store.import_roster(s, c).unwrap();
    EdgeNode::start(store, TimeWindowPolicy::default(), clock, Box::new(SeededIds::new(11)))
}

pub fn minutes(m: i64) -> Duration {
    Duration::minutes(m)
}
