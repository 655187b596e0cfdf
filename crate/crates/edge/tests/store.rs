mod common;

use std::fs::OpenOptions;
use std::io::Write;

use common::*;
use proptest::prelude::*;
use rollcall_core::{AttendanceEvent, AttendanceStatus, CaptureMethod, IdSource, SeededIds, StudentCode};
use rollcall_edge::EdgeStore;

fn event(ids: &mut SeededIds, n: u16) -> AttendanceEvent {
    AttendanceEvent {
        event_id: ids.next_id(),
        student_code: StudentCode::new(2025, 1, 'A', n).unwrap(),
        school_day: monday(),
        status: AttendanceStatus::Present,
        recorded_at: at(monday(), 7, 30, n as u32 % 60),
        method: CaptureMethod::Rfid,
        recorded_by: None,
        edge_sequence: 0,
        supersedes: None,
    }
}

#[derive(Debug, Clone)]
enum Op {
    Append,
    Drain(usize),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(prop_oneof![3 => Just(Op::Append), 1 => (1usize..8).prop_map(Op::Drain)], 1..120)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Concatenating every batch handed out (and acknowledged) reproduces the
    /// log exactly once, in order.
    #[test]
    fn batches_reconstruct_the_log(ops in ops()) {
        let dir = tempfile::tempdir().unwrap();
        let mut s = EdgeStore::open(&dir.path().join("e.log"), "gate-1", monday(), Default::default()).unwrap();
        let mut ids = SeededIds::new(9);
        let mut n = 0u16;
        let mut shipped = Vec::new();
        for op in ops.iter().chain(std::iter::once(&Op::Drain(500))) {
            match op {
                Op::Append => {
                    n += 1;
                    prop_assert_eq!(s.append_event(event(&mut ids, n), None).unwrap(), n as u64);
                }
                Op::Drain(k) => loop {
                    let b = s.pending_batch(*k);
                    if b.is_empty() {
                        prop_assert_eq!(b.first_sequence, s.high_water() + 1);
                        break;
                    }
                    prop_assert!(b.verify().is_ok());
                    prop_assert!(b.len() <= *k);
                    prop_assert_eq!(b.first_sequence, s.high_water() + 1);
                    s.mark_synced(b.last_sequence).unwrap();
                    shipped.extend(b.events);
                    if matches!(op, Op::Drain(k) if *k < 500) { break; }
                },
            }
        }
        prop_assert_eq!(&shipped[..], s.events());
        prop_assert!(shipped.iter().enumerate().all(|(i, e)| e.edge_sequence == i as u64 + 1));
    }
}

#[test]
fn torn_tail_is_cut_and_acknowledged_events_survive() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.log");
    let mut ids = SeededIds::new(1);
    {
        let mut s = EdgeStore::open(&path, "gate-1", monday(), Default::default()).unwrap();
        for n in 1..=5 {
            s.append_event(event(&mut ids, n), None).unwrap();
        }
    }
    // A write interrupted by power loss leaves a partial frame behind.
    let mut f = OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(&[200, 0, 0, 0, 1, 2, 3, 4, b'{', b'"']).unwrap();
    drop(f);
    let mut s = EdgeStore::open(&path, "gate-1", monday(), Default::default()).unwrap();
    assert_eq!(s.recovery().truncated_bytes, 10);
    assert_eq!(s.last_sequence(), 5);
    assert_eq!(s.append_event(event(&mut ids, 6), None).unwrap(), 6);
    drop(s);
    let s = EdgeStore::open(&path, "gate-1", monday(), Default::default()).unwrap();
    assert_eq!(s.recovery().truncated_bytes, 0);
    assert_eq!(s.last_sequence(), 6);
}

#[test]
fn thousand_appends_in_a_day() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = EdgeStore::open(&dir.path().join("e.log"), "gate-1", monday(), Default::default()).unwrap();
    let mut ids = SeededIds::new(3);
    for n in 1..=999 {
        s.append_event(event(&mut ids, n), None).unwrap();
    }
    let mut e = event(&mut ids, 1);
    e.student_code = StudentCode::new(2025, 2, 'A', 1).unwrap();
    s.append_event(e, None).unwrap();
    assert_eq!(s.last_sequence(), 1000);
    let mut a = Vec::new();
    s.export_log(&mut a).unwrap();
    assert_eq!(a.iter().filter(|b| **b == b'\n').count(), 1000);
}
