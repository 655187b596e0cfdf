#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, NaiveTime, Utc};
use rollcall_central::auth::Principal;
use rollcall_central::config::{CentralConfig, ClockSpec};
use rollcall_central::{CentralRuntime, CentralService, ServiceOptions};
use rollcall_core::clock::VirtualClock;
use rollcall_core::{
    AttendanceEvent, AttendanceStatus, CaptureMethod, EventId, IdSource, NewStudent, Role, SeededIds, StudentCode,
    TimeWindowPolicy,
};

pub const ADMIN: (&str, &str) = ("admin", "admin-pass");
pub const NODES: [(&str, &str); 2] = [("gate-1", "secret-1"), ("gate-2", "secret-2")];

pub fn monday() -> NaiveDate {
    NaiveDate::from_ymd_opt(2025, 3, 10).unwrap()
}

pub fn at(day: NaiveDate, h: u32, m: u32, s: u32) -> DateTime<Utc> {
    TimeWindowPolicy::default().instant(day, NaiveTime::from_hms_opt(h, m, s).unwrap())
}

pub fn options(store: Option<PathBuf>) -> ServiceOptions {
    let mut o = ServiceOptions::new(TimeWindowPolicy::default());
    o.password_iterations = 1_000;
    o.edge_nodes = NODES.iter().map(|(n, s)| (n.to_string(), s.to_string())).collect::<BTreeMap<_, _>>();
    o.store_path = store;
    o
}

pub fn config(store: Option<PathBuf>) -> CentralConfig {
    let o = options(store);
    CentralConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        store_path: o.store_path,
        admin: Some((ADMIN.0.into(), ADMIN.1.into())),
        edge_nodes: o.edge_nodes,
        token_ttl: o.token_ttl,
        password_iterations: o.password_iterations,
        cors_origin: Some("*".into()),
        chronic_threshold: o.chronic_threshold,
        clock: ClockSpec::System,
        policy: o.policy,
    }
}

pub fn service(clock: &VirtualClock, store: Option<PathBuf>) -> CentralService {
    CentralService::open(options(store), Arc::new(clock.clone()), Box::new(SeededIds::new(5))).unwrap()
}

pub async fn runtime(clock: &VirtualClock, store: Option<PathBuf>) -> CentralRuntime {
    CentralRuntime::start_with(&config(store), Arc::new(clock.clone()), Box::new(SeededIds::new(5)))
        .await
        .unwrap()
}

pub fn admin() -> Principal {
    user("admin", Role::Admin)
}

pub fn user(name: &str, role: Role) -> Principal {
    Principal::User {
        username: name.into(),
        role,
        student: None,
        sections: Vec::new(),
    }
}

pub fn teacher(sections: &[(u8, char)]) -> Principal {
    Principal::User {
        username: "teacher".into(),
        role: Role::Teacher,
        student: None,
        sections: sections.to_vec(),
    }
}

pub fn edge(node: &str) -> Principal {
    Principal::EdgeNode { node_id: node.into() }
}

pub fn new_student(i: usize, grade: u8, section: char) -> NewStudent {
    NewStudent {
        given_names: format!("Given{i}"),
        family_names: format!("Family{i}"),
        enrollment_year: 2025,
        grade,
        section,
        emergency_contact: String::new(),
    }
}

/// `per_section` students in each of grades 1-2, sections A-B.
pub fn seed(svc: &CentralService, per_section: usize) -> Vec<StudentCode> {
    let mut codes = Vec::new();
    let mut i = 0;
    for grade in 1..=2 {
        for section in ['A', 'B'] {
            for _ in 0..per_section {
                codes.push(svc.create_student(&admin(), new_student(i, grade, section)).unwrap().student_code);
                i += 1;
            }
        }
    }
    codes
}

pub fn rfid(ids: &mut dyn IdSource, student: &StudentCode, day: NaiveDate, t: DateTime<Utc>, seq: u64) -> AttendanceEvent {
    let status = if t < at(day, 8, 1, 0) {
        AttendanceStatus::Present
    } else {
        AttendanceStatus::Late
    };
    AttendanceEvent {
        event_id: ids.next_id(),
        student_code: student.clone(),
        school_day: day,
        status,
        recorded_at: t,
        method: CaptureMethod::Rfid,
        recorded_by: None,
        edge_sequence: seq,
        supersedes: None,
    }
}

pub fn closure(ids: &mut dyn IdSource, student: &StudentCode, day: NaiveDate, seq: u64) -> AttendanceEvent {
    AttendanceEvent {
        event_id: ids.next_id(),
        student_code: student.clone(),
        school_day: day,
        status: AttendanceStatus::Absent,
        recorded_at: at(day, 8, 31, 0),
        method: CaptureMethod::SystemClosure,
        recorded_by: None,
        edge_sequence: seq,
        supersedes: None,
    }
}

pub fn ids(seed: u64) -> SeededIds {
    SeededIds::new(seed)
}

pub fn event_id(ids: &mut SeededIds) -> EventId {
    ids.next_id()
}
