use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DomainError;

/// Student code of the form `YYYY-GS-NNN`, e.g. `2025-1A-001`.
///
/// Lexical order equals (year, grade, section, sequence) order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StudentCode(String);

impl StudentCode {
    pub fn new(year: i32, grade: u8, section: char, sequence: u16) -> Result<Self, DomainError> {
        check_prefix(year, grade, section)?;
        if !(1..=999).contains(&sequence) {
            return Err(DomainError::InvalidStudentCode(format!("sequence {sequence}")));
        }
        Ok(StudentCode(format!("{year:04}-{grade}{section}-{sequence:03}")))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn year(&self) -> i32 {
        self.0[0..4].parse().expect("validated")
    }

    pub fn grade(&self) -> u8 {
        self.0.as_bytes()[5] - b'0'
    }

    pub fn section(&self) -> char {
        self.0.as_bytes()[6] as char
    }

    pub fn sequence(&self) -> u16 {
        self.0[8..11].parse().expect("validated")
    }

    /// The `YYYY-GS-` part shared by every code of one cohort.
    pub fn prefix(&self) -> &str {
        &self.0[..8]
    }
}

fn check_prefix(year: i32, grade: u8, section: char) -> Result<(), DomainError> {
    if !(1..=5).contains(&grade) || !section.is_ascii_uppercase() {
        return Err(DomainError::InvalidGradeOrSection);
    }
    if !(0..=9999).contains(&year) {
        return Err(DomainError::InvalidYear(year));
    }
    Ok(())
}

impl fmt::Display for StudentCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for StudentCode {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        let ok = b.len() == 11
            && b[0..4].iter().all(u8::is_ascii_digit)
            && b[4] == b'-'
            && (b'1'..=b'5').contains(&b[5])
            && b[6].is_ascii_uppercase()
            && b[7] == b'-'
            && b[8..11].iter().all(u8::is_ascii_digit)
            && &b[8..11] != b"000";
        if ok {
            Ok(StudentCode(s.to_string()))
        } else {
            Err(DomainError::InvalidStudentCode(s.to_string()))
        }
    }
}

impl TryFrom<String> for StudentCode {
    type Error = DomainError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<StudentCode> for String {
    fn from(c: StudentCode) -> String {
        c.0
    }
}

/// Returns the next code for the (year, grade, section) cohort: the smallest
/// sequence number from 001 not already used in `roster`.
pub fn generate_student_code<'a, I>(
    enrollment_year: i32,
    grade: u8,
    section: char,
    roster: I,
) -> Result<StudentCode, DomainError>
where
    I: IntoIterator<Item = &'a StudentCode>,
{
    check_prefix(enrollment_year, grade, section)?;
    let mut used = [false; 1000];
    for code in roster {
        if code.year() == enrollment_year && code.grade() == grade && code.section() == section {
            used[code.sequence() as usize] = true;
        }
    }
    let next = (1..=999u16)
        .find(|n| !used[*n as usize])
        .ok_or_else(|| DomainError::CapacityExhausted(format!("{enrollment_year:04}-{grade}{section}-")))?;
    StudentCode::new(enrollment_year, grade, section, next)
}
