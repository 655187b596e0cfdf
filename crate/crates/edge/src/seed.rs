//! Roster seed file for edge nodes that start without central.
//!
//! CSV with a header row:
//! `student_code,given_names,family_names,card_uid,emergency_contact`.
//! Enrollment year, grade and section come from the student code. An empty
//! `card_uid` leaves the student without a card.

use std::io::Read;

use chrono::{DateTime, Utc};
use rollcall_core::{CardState, CardUid, RfidCard, StudentCode, StudentRecord};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
struct Row {
    student_code: StudentCode,
    given_names: String,
    family_names: String,
    #[serde(default)]
    card_uid: Option<String>,
    #[serde(default)]
    emergency_contact: String,
}

pub fn read_seed<R: Read>(input: R, issued_at: DateTime<Utc>) -> Result<(Vec<StudentRecord>, Vec<RfidCard>), String> {
    let mut students = Vec::new();
    let mut cards: Vec<RfidCard> = Vec::new();
    for (i, row) in csv::Reader::from_reader(input).deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| format!("seed line {line}: {e}"))?;
        let code = row.student_code;
        if let Some(uid) = row.card_uid.as_deref().map(str::trim).filter(|u| !u.is_empty()) {
            let uid: CardUid = uid.parse().map_err(|e| format!("seed line {line}: {e}"))?;
            if cards.iter().any(|c| c.uid == uid) {
                return Err(format!("seed line {line}: card {uid} listed twice"));
            }
            cards.push(RfidCard {
                uid,
                state: CardState::Active,
                linked_student: Some(code.clone()),
                issued_at,
            });
        }
        students.push(StudentRecord {
            enrollment_year: code.year(),
            grade: code.grade(),
            section: code.section(),
            student_code: code,
            given_names: row.given_names,
            family_names: row.family_names,
            emergency_contact: row.emergency_contact,
            active: true,
        });
    }
    Ok((students, cards))
}
