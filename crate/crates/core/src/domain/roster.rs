use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{generate_student_code, DomainError, StudentCode, StudentRecord};

/// Input for enrolling a new student; the code is generated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewStudent {
    pub given_names: String,
    pub family_names: String,
    pub enrollment_year: i32,
    pub grade: u8,
    pub section: char,
    #[serde(default)]
    pub emergency_contact: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Roster {
    students: BTreeMap<StudentCode, StudentRecord>,
}

impl Roster {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_code(&self, year: i32, grade: u8, section: char) -> Result<StudentCode, DomainError> {
        let lo = StudentCode::new(year, grade, section, 1)?;
        let hi = StudentCode::new(year, grade, section, 999)?;
        generate_student_code(year, grade, section, self.students.range(lo..=hi).map(|(c, _)| c))
    }

    pub fn add(&mut self, new: NewStudent) -> Result<StudentRecord, DomainError> {
        let code = self.next_code(new.enrollment_year, new.grade, new.section)?;
        let record = StudentRecord {
            student_code: code.clone(),
            given_names: new.given_names,
            family_names: new.family_names,
            enrollment_year: new.enrollment_year,
            grade: new.grade,
            section: new.section,
            emergency_contact: new.emergency_contact,
            active: true,
        };
        self.students.insert(code, record.clone());
        Ok(record)
    }

    /// Inserts or replaces a record verbatim (replica refresh, journal replay).
    pub fn upsert(&mut self, record: StudentRecord) {
        self.students.insert(record.student_code.clone(), record);
    }

    pub fn get(&self, code: &StudentCode) -> Option<&StudentRecord> {
        self.students.get(code)
    }

    pub fn is_active(&self, code: &StudentCode) -> bool {
        self.students.get(code).is_some_and(|s| s.active)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StudentRecord> {
        self.students.values()
    }

    pub fn active(&self) -> impl Iterator<Item = &StudentRecord> {
        self.students.values().filter(|s| s.active)
    }

    pub fn codes(&self) -> impl Iterator<Item = &StudentCode> {
        self.students.keys()
    }

    pub fn len(&self) -> usize {
        self.students.len()
    }

    pub fn is_empty(&self) -> bool {
        self.students.is_empty()
    }
}
