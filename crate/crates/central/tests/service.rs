mod common;

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use common::*;
use proptest::prelude::*;
use rollcall_central::api::*;
use rollcall_central::auth::Principal;
use rollcall_central::ServiceError;
use rollcall_core::clock::VirtualClock;
use rollcall_core::sync::SyncBatch;
use rollcall_core::{AttendanceEvent, AttendanceStatus, AuditAction, Endpoint, Role, StudentCode};

fn push(svc: &rollcall_central::CentralService, node: &str, first: u64, events: Vec<AttendanceEvent>) -> rollcall_core::sync::PushResponse {
    svc.push_events(&edge(node), SyncBatch::new(node, first, events)).unwrap()
}

/// Renumbers edge sequences from `first`.
fn sequenced(mut events: Vec<AttendanceEvent>, first: u64) -> Vec<AttendanceEvent> {
    for (i, e) in events.iter_mut().enumerate() {
        e.edge_sequence = first + i as u64;
    }
    events
}

fn week() -> Vec<NaiveDate> {
    (0..5).map(|i| monday() + Duration::days(i)).collect()
}

/// Generated (day, student) outcomes: 0 none, 1 present, 2 late, 3 absent.
fn populate(svc: &rollcall_central::CentralService, codes: &[StudentCode], plan: &[u8], seed: u64) -> Vec<AttendanceEvent> {
    let mut ids = ids(seed);
    let mut events = Vec::new();
    for (i, (day, code)) in week().into_iter().flat_map(|d| codes.iter().map(move |c| (d, c))).enumerate() {
        let e = match plan[i % plan.len()] {
            0 => continue,
            1 => rfid(&mut ids, code, day, at(day, 7, 30, i as u32 % 60), 0),
            2 => rfid(&mut ids, code, day, at(day, 8, 10, i as u32 % 60), 0),
            _ => closure(&mut ids, code, day, 0),
        };
        events.push(e);
    }
    let events = sequenced(events, 1);
    for (k, chunk) in events.chunks(500).enumerate() {
        push(svc, "gate-1", 1 + 500 * k as u64, chunk.to_vec());
    }
    events
}

fn oracle(
    events: &[AttendanceEvent],
    grade: Option<u8>,
    section: Option<char>,
    status: Option<AttendanceStatus>,
) -> Vec<&AttendanceEvent> {
    let mut v: Vec<&AttendanceEvent> = events
        .iter()
        .filter(|e| grade.is_none_or(|g| e.student_code.grade() == g))
        .filter(|e| section.is_none_or(|s| e.student_code.section() == s))
        .filter(|e| status.is_none_or(|s| e.status == s))
        .collect();
    v.sort_by(|a, b| (a.school_day, &a.student_code).cmp(&(b.school_day, &b.student_code)));
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pages_concatenate_to_the_full_scan(
        plan in prop::collection::vec(0u8..4, 1..40),
        grade in prop::option::of(1u8..=2),
        section in prop::option::of(prop::sample::select(vec!['A', 'B'])),
        status in prop::option::of(prop::sample::select(vec![
            AttendanceStatus::Present, AttendanceStatus::Late, AttendanceStatus::Absent,
        ])),
        limit in 1usize..25,
    ) {
        let clock = VirtualClock::new(at(monday() + Duration::days(4), 12, 0, 0));
        let svc = service(&clock, None);
        let codes = seed(&svc, 3);
        let events = populate(&svc, &codes, &plan, 9);
        let want = oracle(&events, grade, section, status);

        let mut q = AttendanceQuery {
            from: Some(monday()),
            to: Some(monday() + Duration::days(4)),
            grade, section, status,
            limit: Some(limit),
            ..Default::default()
        };
        let mut got = Vec::new();
        loop {
            q.offset = Some(got.len());
            let page = svc.query_attendance(&admin(), &q).unwrap();
            prop_assert_eq!(page.total, want.len() as u64);
            prop_assert!(page.items.len() <= limit);
            let n = page.items.len();
            got.extend(page.items);
            if n == 0 { break; }
        }
        let got_ids: Vec<_> = got.iter().map(|e| e.event_id).collect();
        let want_ids: Vec<_> = want.iter().map(|e| e.event_id).collect();
        prop_assert_eq!(got_ids, want_ids);

        let counts = svc.query_attendance(&admin(), &q).unwrap().counts;
        for s in [AttendanceStatus::Present, AttendanceStatus::Late, AttendanceStatus::Absent] {
            prop_assert_eq!(counts.get(s), want.iter().filter(|e| e.status == s).count() as u64);
        }
    }
}

#[test]
fn grade_is_the_union_of_its_sections() {
    let clock = VirtualClock::new(at(monday() + Duration::days(4), 12, 0, 0));
    let svc = service(&clock, None);
    let codes = seed(&svc, 4);
    populate(&svc, &codes, &[1, 2, 3, 1, 0, 3, 2], 3);
    let q = |grade, section| AttendanceQuery {
        from: Some(monday()),
        to: Some(monday() + Duration::days(4)),
        grade: Some(grade),
        section,
        limit: Some(1000),
        ..Default::default()
    };
    for grade in 1..=2 {
        let whole = svc.query_attendance(&admin(), &q(grade, None)).unwrap();
        let mut parts: Vec<_> = ['A', 'B']
            .into_iter()
            .flat_map(|s| svc.query_attendance(&admin(), &q(grade, Some(s))).unwrap().items)
            .collect();
        parts.sort_by(|a, b| (a.school_day, &a.student_code).cmp(&(b.school_day, &b.student_code)));
        assert_eq!(whole.items, parts);
        assert!(whole.total > 0);
    }
}

#[test]
fn query_rejects_bad_ranges_and_pages() {
    let clock = VirtualClock::new(at(monday(), 12, 0, 0));
    let svc = service(&clock, None);
    let bad = AttendanceQuery {
        from: Some(monday()),
        to: Some(monday() - Duration::days(1)),
        ..Default::default()
    };
    assert_eq!(svc.query_attendance(&admin(), &bad).unwrap_err().code(), "invalid_range");
    let long = AttendanceQuery {
        from: Some(monday() - Duration::days(400)),
        to: Some(monday()),
        ..Default::default()
    };
    assert_eq!(svc.query_attendance(&admin(), &long).unwrap_err().code(), "invalid_range");
    for limit in [0, 1001] {
        let q = AttendanceQuery {
            limit: Some(limit),
            ..Default::default()
        };
        assert_eq!(svc.query_attendance(&admin(), &q).unwrap_err().status(), 400);
    }
}

#[test]
fn teachers_and_students_are_scoped() {
    let clock = VirtualClock::new(at(monday() + Duration::days(4), 12, 0, 0));
    let svc = service(&clock, None);
    let codes = seed(&svc, 2);
    populate(&svc, &codes, &[1, 2, 3], 4);
    let range = AttendanceQuery {
        from: Some(monday()),
        to: Some(monday() + Duration::days(4)),
        limit: Some(1000),
        ..Default::default()
    };

    let t = teacher(&[(1, 'A')]);
    let page = svc.query_attendance(&t, &range).unwrap();
    assert!(page.total > 0);
    assert!(page.items.iter().all(|e| e.student_code.grade() == 1 && e.student_code.section() == 'A'));
    let denied_before = svc.read(|s| s.audit().iter().filter(|a| a.action == AuditAction::Denied).count());
    let other = AttendanceQuery {
        grade: Some(2),
        ..range.clone()
    };
    assert!(matches!(svc.query_attendance(&t, &other), Err(ServiceError::Forbidden(_))));
    let foreign = AttendanceQuery {
        student: Some(codes.last().unwrap().clone()),
        ..range.clone()
    };
    assert!(matches!(svc.query_attendance(&t, &foreign), Err(ServiceError::Forbidden(_))));
    let denied_after = svc.read(|s| s.audit().iter().filter(|a| a.action == AuditAction::Denied).count());
    assert_eq!(denied_after, denied_before + 2);
    let institution = SummaryQuery::default();
    assert!(matches!(svc.summary(&t, &institution), Err(ServiceError::Forbidden(_))));
    let own_section = SummaryQuery {
        grade: Some(1),
        section: Some('A'),
        period: Some("week".into()),
        ..Default::default()
    };
    assert_eq!(svc.summary(&t, &own_section).unwrap().students, 2);
    let listed = svc.list_students(&t, &StudentsQuery::default()).unwrap();
    assert_eq!(listed.len(), 2);

    let me = codes[0].clone();
    let student = Principal::User {
        username: "kid".into(),
        role: Role::Student,
        student: Some(me.clone()),
        sections: Vec::new(),
    };
    let mine = svc.query_attendance(&student, &range).unwrap();
    assert!(mine.total > 0 && mine.items.iter().all(|e| e.student_code == me));
    let theirs = AttendanceQuery {
        student: Some(codes[1].clone()),
        ..range
    };
    assert!(matches!(svc.query_attendance(&student, &theirs), Err(ServiceError::Forbidden(_))));
}

#[test]
fn earliest_record_wins_across_nodes() {
    let day = monday();
    let clock = VirtualClock::new(at(day, 12, 0, 0));
    for gate1_first in [true, false] {
        let svc = service(&clock, None);
        let codes = seed(&svc, 1);
        let mut ids = ids(1);
        let late = rfid(&mut ids, &codes[0], day, at(day, 7, 40, 0), 1);
        let early = rfid(&mut ids, &codes[0], day, at(day, 7, 35, 0), 1);
        let (r1, r2) = if gate1_first {
            (push(&svc, "gate-1", 1, vec![late.clone()]), push(&svc, "gate-2", 1, vec![early.clone()]))
        } else {
            let r2 = push(&svc, "gate-2", 1, vec![early.clone()]);
            (push(&svc, "gate-1", 1, vec![late.clone()]), r2)
        };
        assert_eq!(r1.conflicts + r2.conflicts, 1);
        assert_eq!(svc.read(|s| s.effective(day, &codes[0]).cloned()), Some(early.clone()));
        let slot = svc.read(|s| s.slot(day, &codes[0]).cloned()).unwrap();
        assert_eq!(slot.losers, vec![late.clone()], "loser retained");
        let detail = svc.read(|s| {
            s.audit()
                .iter()
                .filter(|a| a.action == AuditAction::SyncPush)
                .map(|a| a.detail.clone())
                .collect::<Vec<_>>()
                .join("|")
        });
        assert!(detail.contains(&format!("{} lost to {}", late.event_id, early.event_id)), "{detail}");
    }
}

#[test]
fn replayed_batches_are_duplicates() {
    let day = monday();
    let clock = VirtualClock::new(at(day, 12, 0, 0));
    let svc = service(&clock, None);
    let codes = seed(&svc, 5);
    let mut ids = ids(2);
    let events: Vec<_> = codes
        .iter()
        .enumerate()
        .map(|(i, c)| rfid(&mut ids, c, day, at(day, 7, 30, i as u32), i as u64 + 1))
        .collect();
    let first = push(&svc, "gate-1", 1, events.clone());
    assert_eq!((first.accepted_high_water, first.duplicates), (20, 0));
    let again = push(&svc, "gate-1", 1, events.clone());
    assert_eq!((again.accepted_high_water, again.duplicates, again.conflicts), (20, 20, 0));
    // Overlap: 11..=20 already held, 21 is new.
    let extra = rfid(&mut ids, &codes[0], day + Duration::days(1), at(day + Duration::days(1), 7, 30, 0), 21);
    let mut overlap = events[10..].to_vec();
    overlap.push(extra);
    let r = push(&svc, "gate-1", 11, overlap);
    assert_eq!((r.accepted_high_water, r.duplicates), (21, 10));
    assert_eq!(svc.read(|s| s.event_ids().count()), 21);
}

#[test]
fn gaps_and_bad_batches_are_refused() {
    let day = monday();
    let clock = VirtualClock::new(at(day, 12, 0, 0));
    let svc = service(&clock, None);
    let codes = seed(&svc, 1);
    let mut ids = ids(3);
    let e = rfid(&mut ids, &codes[0], day, at(day, 7, 30, 0), 5);
    let err = svc
        .push_events(&edge("gate-1"), SyncBatch::new("gate-1", 5, vec![e.clone()]))
        .unwrap_err();
    assert!(matches!(err, ServiceError::SequenceGap { high_water: 0 }));
    assert_eq!(err.status(), 409);

    let mut tampered = SyncBatch::new("gate-1", 1, sequenced(vec![e.clone()], 1));
    tampered.checksum ^= 1;
    let err = svc.push_events(&edge("gate-1"), tampered).unwrap_err();
    assert_eq!((err.status(), err.code()), (422, "checksum_mismatch"));

    let err = svc
        .push_events(&edge("gate-2"), SyncBatch::new("gate-1", 1, sequenced(vec![e.clone()], 1)))
        .unwrap_err();
    assert_eq!(err.status(), 403);

    let mut wrong = sequenced(vec![e], 1);
    wrong[0].status = AttendanceStatus::Absent;
    let err = svc.push_events(&edge("gate-1"), SyncBatch::new("gate-1", 1, wrong)).unwrap_err();
    assert_eq!((err.status(), err.code()), (422, "invalid_batch"));

    let empty = svc.push_events(&edge("gate-1"), SyncBatch::new("gate-1", 1, vec![])).unwrap();
    assert_eq!(empty.accepted_high_water, 0);
}

#[test]
fn corrections_chain_on_the_effective_record() {
    let day = monday();
    let clock = VirtualClock::new(at(day, 12, 0, 0));
    let svc = service(&clock, None);
    let codes = seed(&svc, 1);
    let aux = user("aux", Role::Auxiliary);
    let mut ids = ids(4);
    let present = rfid(&mut ids, &codes[0], day, at(day, 7, 30, 0), 1);
    let absent = closure(&mut ids, &codes[1], day, 2);
    push(&svc, "gate-1", 1, vec![present.clone(), absent.clone()]);

    let req = |c: &StudentCode| JustifyRequest {
        student_code: c.clone(),
        school_day: day,
        note: "doctor".into(),
    };
    assert_eq!(svc.justify(&aux, &req(&codes[0])).unwrap_err().code(), "not_absent");
    assert_eq!(svc.justify(&aux, &req(&codes[2])).unwrap_err().status(), 404);
    let j = svc.justify(&aux, &req(&codes[1])).unwrap();
    assert_eq!(j.supersedes, Some(absent.event_id));
    assert_eq!(svc.read(|s| s.effective(day, &codes[1]).cloned()), Some(j.clone()));

    let mark = |d: NaiveDate, status| ManualMarkRequest {
        student_code: codes[0].clone(),
        school_day: d,
        status,
        note: String::new(),
    };
    let m = svc.manual_mark(&aux, &mark(day, AttendanceStatus::Late)).unwrap();
    assert_eq!(m.supersedes, Some(present.event_id));
    assert_eq!(svc.manual_mark(&aux, &mark(day + Duration::days(1), AttendanceStatus::Late)).unwrap_err().code(), "future_date");
    assert_eq!(svc.manual_mark(&aux, &mark(day - Duration::days(1), AttendanceStatus::Late)).unwrap_err().code(), "non_school_day");
    assert_eq!(svc.manual_mark(&aux, &mark(day, AttendanceStatus::Justified)).unwrap_err().code(), "invalid_status");
    assert!(matches!(
        svc.manual_mark(&teacher(&[(1, 'A')]), &mark(day, AttendanceStatus::Present)),
        Err(ServiceError::Forbidden(_))
    ));
}

#[test]
fn every_successful_mutation_writes_one_audit_entry() {
    let day = monday();
    let clock = VirtualClock::new(at(day, 12, 0, 0));
    let svc = service(&clock, None);
    let audit_len = || svc.read(|s| s.audit().len());
    let mut ids = ids(6);
    let mut calls = 0;
    let mut step = |f: &dyn Fn() -> bool| {
        let before = audit_len();
        if f() {
            calls += 1;
            assert_eq!(audit_len(), before + 1, "mutation {calls}");
        }
    };
    let codes: std::cell::RefCell<Vec<StudentCode>> = Default::default();
    for i in 0..3 {
        step(&|| {
            codes.borrow_mut().push(svc.create_student(&admin(), new_student(i, 1, 'A')).unwrap().student_code);
            true
        });
    }
    let codes = codes.into_inner();
    let uid = |i: u8| rollcall_core::CardUid::from_bytes([0xA0, 0, 0, i]);
    step(&|| svc.enroll_card(&admin(), &EnrollCardRequest { uid: uid(1), student_code: codes[0].clone() }).is_ok());
    // Re-enrolling a second card displaces the first: still one entry.
    step(&|| svc.enroll_card(&admin(), &EnrollCardRequest { uid: uid(2), student_code: codes[0].clone() }).is_ok());
    step(&|| svc.set_card_state(&admin(), uid(2), rollcall_core::CardState::Blocked).is_ok());
    step(&|| svc.set_card_state(&admin(), uid(1), rollcall_core::CardState::Active).is_ok());
    step(&|| {
        svc.create_user(
            &admin(),
            CreateUserRequest {
                username: "t1".into(),
                password: "password1".into(),
                role: Role::Teacher,
                student_code: None,
                sections: vec!["1A".into()],
            },
        )
        .is_ok()
    });
    let e = rfid(&mut ids, &codes[1], day, at(day, 7, 50, 0), 1);
    let c = closure(&mut ids, &codes[2], day, 2);
    step(&|| svc.push_events(&edge("gate-1"), SyncBatch::new("gate-1", 1, vec![e.clone(), c.clone()])).is_ok());
    step(&|| svc.push_events(&edge("gate-1"), SyncBatch::new("gate-1", 1, vec![e.clone(), c.clone()])).is_ok());
    step(&|| {
        svc.manual_mark(
            &admin(),
            &ManualMarkRequest {
                student_code: codes[0].clone(),
                school_day: day,
                status: AttendanceStatus::Present,
                note: "forgot card".into(),
            },
        )
        .is_ok()
    });
    step(&|| {
        svc.justify(
            &admin(),
            &JustifyRequest {
                student_code: codes[2].clone(),
                school_day: day,
                note: String::new(),
            },
        )
        .is_ok()
    });
    let mutating: Vec<_> = Endpoint::ALL.iter().filter(|e| e.is_mutating()).collect();
    assert_eq!(mutating.len(), 7);
    assert_eq!(calls, 12);
}

#[tokio::test]
async fn live_feed_resumes_from_a_cursor() {
    let day = monday();
    let clock = VirtualClock::new(at(day, 7, 0, 0));
    let svc = std::sync::Arc::new(service(&clock, None));
    let codes = seed(&svc, 3);
    let mut ids = ids(7);
    let staff = user("aux", Role::Auxiliary);
    let snap = svc
        .live_feed(&staff, &LiveQuery { day: Some(day), ..Default::default() })
        .await
        .unwrap();
    assert!(snap.snapshot && snap.items.is_empty());

    let events: Vec<_> = codes
        .iter()
        .enumerate()
        .map(|(i, c)| rfid(&mut ids, c, day, at(day, 7, 30, i as u32), i as u64 + 1))
        .collect();
    let waiter = {
        let svc = svc.clone();
        let staff = staff.clone();
        let cursor = snap.cursor;
        tokio::spawn(async move {
            svc.live_feed(&staff, &LiveQuery { day: Some(day), cursor: Some(cursor), wait_ms: Some(5_000) })
                .await
                .unwrap()
        })
    };
    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    push(&svc, "gate-1", 1, events[..5].to_vec());
    let first = waiter.await.unwrap();
    assert!(!first.heartbeat);
    assert_eq!(first.items, events[..5].to_vec());
    push(&svc, "gate-1", 6, events[5..].to_vec());

    // Two readers resuming from the same cursor see the same sequence, and
    // cursors chain without gaps or repeats.
    let mut seen = first.items.clone();
    let mut cursor = first.cursor;
    loop {
        let q = LiveQuery { day: Some(day), cursor: Some(cursor), wait_ms: Some(30) };
        let a = svc.live_feed(&staff, &q).await.unwrap();
        let b = svc.live_feed(&staff, &q).await.unwrap();
        assert_eq!(a, b);
        if a.heartbeat {
            break;
        }
        seen.extend(a.items);
        cursor = a.cursor;
    }
    assert_eq!(seen, events);

    // Teachers only see their sections.
    let t = svc
        .live_feed(&teacher(&[(2, 'B')]), &LiveQuery { day: Some(day), ..Default::default() })
        .await
        .unwrap();
    assert!(t.items.iter().all(|e| e.student_code.grade() == 2 && e.student_code.section() == 'B'));
    assert_eq!(t.items.len(), 3);

    let err = svc
        .live_feed(&staff, &LiveQuery { day: Some(day), cursor: Some(cursor + 100), wait_ms: Some(0) })
        .await
        .unwrap_err();
    assert_eq!(err.status(), 410);
}

#[test]
fn login_throttle_and_token_expiry() {
    let clock = VirtualClock::new(at(monday(), 9, 0, 0));
    let svc = service(&clock, None);
    svc.ensure_admin(ADMIN.0, ADMIN.1).unwrap();
    let login = |pw: &str| {
        svc.login(&LoginRequest {
            username: ADMIN.0.into(),
            password: pw.into(),
        })
    };
    let ok = login(ADMIN.1).unwrap();
    assert_eq!(ok.token.len(), 64);
    for _ in 0..5 {
        assert_eq!(login("wrong").unwrap_err().code(), "invalid_credentials");
    }
    assert_eq!(login(ADMIN.1).unwrap_err().code(), "rate_limited");
    let fails = svc.read(|s| s.audit().iter().filter(|a| a.action == AuditAction::LoginFail).count());
    assert_eq!(fails, 5);
    clock.advance(Duration::seconds(61));
    let fresh = login(ADMIN.1).unwrap();

    assert!(svc.authorize(Endpoint::AuditLog, Some(&fresh.token)).unwrap().is_some());
    clock.advance(Duration::hours(24));
    assert_eq!(svc.authorize(Endpoint::AuditLog, Some(&fresh.token)).unwrap_err().code(), "auth_expired");
    assert_eq!(svc.authorize(Endpoint::AuditLog, Some("nope")).unwrap_err().code(), "unauthorized");
    assert_eq!(svc.authorize(Endpoint::AuditLog, None).unwrap_err().code(), "unauthorized");

    let t = svc
        .issue_sync_token(&rollcall_core::sync::TokenRequest {
            node_id: "gate-1".into(),
            secret: "secret-1".into(),
        })
        .unwrap();
    assert_eq!(svc.authorize(Endpoint::SyncEvents, Some(&t.token)).unwrap(), Some(edge("gate-1")));
    assert_eq!(svc.authorize(Endpoint::AuditLog, Some(&t.token)).unwrap_err().status(), 403);
    let bad = svc.issue_sync_token(&rollcall_core::sync::TokenRequest {
        node_id: "gate-1".into(),
        secret: "secret-2".into(),
    });
    assert_eq!(bad.unwrap_err().status(), 401);
}

#[test]
fn users_are_validated() {
    let clock = VirtualClock::new(at(monday(), 9, 0, 0));
    let svc = service(&clock, None);
    let codes = seed(&svc, 1);
    let req = |name: &str, role, code: Option<StudentCode>, sections: &[&str]| CreateUserRequest {
        username: name.into(),
        password: "long-enough".into(),
        role,
        student_code: code,
        sections: sections.iter().map(|s| s.to_string()).collect(),
    };
    svc.create_user(&admin(), req("kid", Role::Student, Some(codes[0].clone()), &[])).unwrap();
    let dup = svc.create_user(&admin(), req("kid", Role::Auxiliary, None, &[])).unwrap_err();
    assert_eq!((dup.status(), dup.code()), (409, "user_exists"));
    assert_eq!(svc.create_user(&admin(), req("k2", Role::Student, None, &[])).unwrap_err().status(), 400);
    assert_eq!(svc.create_user(&admin(), req("t", Role::Teacher, None, &["1a"])).unwrap_err().status(), 400);
    assert_eq!(svc.create_user(&admin(), req("bad name", Role::Auxiliary, None, &[])).unwrap_err().status(), 400);
    let mut short = req("short", Role::Auxiliary, None, &[]);
    short.password = "1234567".into();
    assert_eq!(svc.create_user(&admin(), short).unwrap_err().status(), 400);
    let login = svc
        .login(&LoginRequest {
            username: "kid".into(),
            password: "long-enough".into(),
        })
        .unwrap();
    assert_eq!(login.role, Role::Student);
}

#[test]
fn cards_follow_the_one_active_card_rule() {
    let clock = VirtualClock::new(at(monday(), 9, 0, 0));
    let svc = service(&clock, None);
    let codes = seed(&svc, 1);
    let uid = |i: u8| rollcall_core::CardUid::from_bytes([0xB0, 0, 0, i]);
    let enroll = |u, c: &StudentCode| {
        svc.enroll_card(
            &admin(),
            &EnrollCardRequest {
                uid: u,
                student_code: c.clone(),
            },
        )
    };
    enroll(uid(1), &codes[0]).unwrap();
    let dup = enroll(uid(1), &codes[1]).unwrap_err();
    assert_eq!((dup.status(), dup.code()), (409, "duplicate_uid"));
    let second = enroll(uid(2), &codes[0]).unwrap();
    assert_eq!(second.displaced.len(), 1);
    let mine = svc.list_cards(&CardsQuery {
        student: Some(codes[0].clone()),
    });
    assert_eq!(mine.iter().filter(|c| c.state == rollcall_core::CardState::Active).count(), 1);
    assert_eq!(
        svc.set_card_state(&admin(), uid(9), rollcall_core::CardState::Blocked).unwrap_err().status(),
        404
    );
    let before = svc.read(|s| s.roster_version());
    let delta = svc.pull_roster(before - 1);
    assert!(!delta.cards.is_empty());
    assert_eq!(svc.pull_roster(before).cards.len(), 0);
    assert_eq!(svc.pull_roster(before + 50).version, before, "stale since resets");
}

#[test]
fn chronic_absence_counts_closed_days_only() {
    let first = monday();
    let clock = VirtualClock::new(at(first + Duration::days(14), 12, 0, 0));
    let svc = service(&clock, None);
    let codes = seed(&svc, 1);
    let mut ids = ids(8);
    let days: Vec<NaiveDate> = (0..14)
        .map(|i| first + Duration::days(i))
        .filter(|d| svc.policy().is_school_day(*d))
        .collect();
    assert_eq!(days.len(), 10);
    let mut events = Vec::new();
    for (di, d) in days.iter().enumerate() {
        for (si, c) in codes.iter().enumerate() {
            // Student 0 misses two days, student 1 one day.
            let absent = (si == 0 && di < 2) || (si == 1 && di == 5);
            events.push(if absent {
                closure(&mut ids, c, *d, 0)
            } else {
                rfid(&mut ids, c, *d, at(*d, 7, 45, 0), 0)
            });
        }
    }
    push(&svc, "gate-1", 1, sequenced(events, 1));
    let q = ChronicQuery {
        from: days[0],
        to: days[9],
        threshold: Some(0.2),
        grade: None,
        section: None,
        student: None,
    };
    let r = svc.chronic(&admin(), &q).unwrap();
    let flags: BTreeMap<_, _> = r.students.iter().map(|f| (f.student.clone(), f)).collect();
    assert!(flags[&codes[0]].flagged);
    assert!(!flags[&codes[1]].flagged);
    assert_eq!(flags[&codes[1]].absence_rate, 0.1);

    svc.justify(
        &admin(),
        &JustifyRequest {
            student_code: codes[0].clone(),
            school_day: days[0],
            note: String::new(),
        },
    )
    .unwrap();
    let r = svc.chronic(&admin(), &q).unwrap();
    assert!(!r.students.iter().find(|f| f.student == codes[0]).unwrap().flagged, "justified absences do not count");

    let short = ChronicQuery {
        to: days[8],
        ..q
    };
    assert_eq!(svc.chronic(&admin(), &short).unwrap_err().code(), "window_too_short");
}

#[test]
fn journal_replay_restores_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("central.log");
    let day = monday();
    let clock = VirtualClock::new(at(day, 12, 0, 0));
    let (effective, audit, version, token) = {
        let svc = service(&clock, Some(path.clone()));
        svc.ensure_admin(ADMIN.0, ADMIN.1).unwrap();
        let codes = seed(&svc, 2);
        svc.enroll_card(
            &admin(),
            &EnrollCardRequest {
                uid: rollcall_core::CardUid::from_bytes([1, 2, 3, 4]),
                student_code: codes[0].clone(),
            },
        )
        .unwrap();
        let mut ids = ids(10);
        let events: Vec<_> = codes
            .iter()
            .enumerate()
            .map(|(i, c)| rfid(&mut ids, c, day, at(day, 7, 30, i as u32), i as u64 + 1))
            .collect();
        push(&svc, "gate-1", 1, events);
        svc.justify(
            &admin(),
            &JustifyRequest {
                student_code: codes[0].clone(),
                school_day: day,
                note: String::new(),
            },
        )
        .unwrap_err();
        let token = svc
            .login(&LoginRequest {
                username: ADMIN.0.into(),
                password: ADMIN.1.into(),
            })
            .unwrap()
            .token;
        svc.read(|s| (s.day(day).cloned().collect::<Vec<_>>(), s.audit().to_vec(), s.roster_version(), token))
    };
    let svc = service(&clock, Some(path));
    svc.read(|s| {
        assert_eq!(s.day(day).cloned().collect::<Vec<_>>(), effective);
        assert_eq!(s.audit(), audit.as_slice());
        assert_eq!(s.roster_version(), version);
        assert_eq!(s.high_water("gate-1"), 8);
        assert_eq!(s.users.len(), 1);
    });
    assert!(!svc.ensure_admin(ADMIN.0, ADMIN.1).unwrap());
    assert_eq!(svc.authorize(Endpoint::AuditLog, Some(&token)).unwrap_err().code(), "unauthorized");
}

#[test]
fn summaries_report_rates() {
    let day = monday();
    let clock = VirtualClock::new(at(day, 12, 0, 0));
    let svc = service(&clock, None);
    let codes = seed(&svc, 1);
    let mut ids = ids(11);
    let events = vec![
        rfid(&mut ids, &codes[0], day, at(day, 7, 30, 0), 1),
        rfid(&mut ids, &codes[1], day, at(day, 8, 5, 0), 2),
        closure(&mut ids, &codes[2], day, 3),
        closure(&mut ids, &codes[3], day, 4),
    ];
    push(&svc, "gate-1", 1, events);
    let s = svc.summary(&admin(), &SummaryQuery::default()).unwrap();
    assert_eq!((s.students, s.school_days, s.counts.total(), s.pending), (4, 1, 4, 0));
    assert_eq!(s.attendance_rate, 0.5);
    assert_eq!(s.tardiness_rate, 0.5);
    assert!(!s.provisional);
    let grade = svc
        .summary(
            &admin(),
            &SummaryQuery {
                scope: Some("grade".into()),
                grade: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
    assert_eq!((grade.students, grade.counts.absent), (2, 2));
    let bad = svc.summary(
        &admin(),
        &SummaryQuery {
            period: Some("range".into()),
            ..Default::default()
        },
    );
    assert_eq!(bad.unwrap_err().status(), 400);
}
