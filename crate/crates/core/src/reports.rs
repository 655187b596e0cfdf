//! Attendance statistics, chronic-absenteeism flags and CSV export.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::ops::{Add, AddAssign};

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AttendanceEvent, AttendanceStatus, Roster, StudentCode, StudentRecord};
use crate::policy::SchoolCalendar;

/// Default cutoff for chronic absenteeism: unjustified absences on at least
/// 10% of closed school days.
pub const DEFAULT_CHRONIC_THRESHOLD: f64 = 0.10;
/// Fewest closed school days a chronic-absenteeism window may contain.
pub const MIN_CHRONIC_WINDOW_DAYS: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("invalid period: {0}")]
    InvalidPeriod(String),
    #[error("window holds {closed_days} closed school days, at least {MIN_CHRONIC_WINDOW_DAYS} needed")]
    WindowTooShort { closed_days: usize },
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReportScope {
    Institution,
    Grade { grade: u8 },
    Section { grade: u8, section: char },
    Student { student: StudentCode },
}

impl ReportScope {
    pub fn includes(&self, s: &StudentRecord) -> bool {
        match self {
            ReportScope::Institution => true,
            ReportScope::Grade { grade } => s.grade == *grade,
            ReportScope::Section { grade, section } => s.grade == *grade && s.section == *section,
            ReportScope::Student { student } => &s.student_code == student,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Period {
    Day { date: NaiveDate },
    /// ISO-8601 week (Monday to Sunday).
    Week { year: i32, week: u32 },
    Month { year: i32, month: u32 },
    Range { from: NaiveDate, to: NaiveDate },
}

impl Period {
    /// Inclusive first and last calendar day.
    pub fn bounds(&self) -> Result<(NaiveDate, NaiveDate), ReportError> {
        let bad = |m: String| ReportError::InvalidPeriod(m);
        match *self {
            Period::Day { date } => Ok((date, date)),
            Period::Week { year, week } => {
                let mon = NaiveDate::from_isoywd_opt(year, week, Weekday::Mon)
                    .ok_or_else(|| bad(format!("no ISO week {year}-W{week:02}")))?;
                let sun = NaiveDate::from_isoywd_opt(year, week, Weekday::Sun).expect("same week");
                Ok((mon, sun))
            }
            Period::Month { year, month } => {
                let first = NaiveDate::from_ymd_opt(year, month, 1).ok_or_else(|| bad(format!("no month {year}-{month}")))?;
                let next = if month == 12 {
                    NaiveDate::from_ymd_opt(year + 1, 1, 1)
                } else {
                    NaiveDate::from_ymd_opt(year, month + 1, 1)
                }
                .expect("valid");
                Ok((first, next.pred_opt().expect("valid")))
            }
            Period::Range { from, to } if from <= to => Ok((from, to)),
            Period::Range { from, to } => Err(bad(format!("{from} is after {to}"))),
        }
    }

    /// The ISO week containing `date`.
    pub fn week_of(date: NaiveDate) -> Period {
        let w = date.iso_week();
        Period::Week {
            year: w.year(),
            week: w.week(),
        }
    }

    pub fn month_of(date: NaiveDate) -> Period {
        Period::Month {
            year: date.year(),
            month: date.month(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub present: u64,
    pub late: u64,
    pub absent: u64,
    pub justified: u64,
}

impl StatusCounts {
    pub fn record(&mut self, status: AttendanceStatus) {
        match status {
            AttendanceStatus::Present => self.present += 1,
            AttendanceStatus::Late => self.late += 1,
            AttendanceStatus::Absent => self.absent += 1,
            AttendanceStatus::Justified => self.justified += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.present + self.late + self.absent + self.justified
    }

    pub fn get(&self, status: AttendanceStatus) -> u64 {
        match status {
            AttendanceStatus::Present => self.present,
            AttendanceStatus::Late => self.late,
            AttendanceStatus::Absent => self.absent,
            AttendanceStatus::Justified => self.justified,
        }
    }
}

impl Add for StatusCounts {
    type Output = StatusCounts;

    fn add(self, o: StatusCounts) -> StatusCounts {
        StatusCounts {
            present: self.present + o.present,
            late: self.late + o.late,
            absent: self.absent + o.absent,
            justified: self.justified + o.justified,
        }
    }
}

impl AddAssign for StatusCounts {
    fn add_assign(&mut self, o: StatusCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for StatusCounts {
    fn sum<I: Iterator<Item = StatusCounts>>(iter: I) -> Self {
        iter.fold(StatusCounts::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttendanceSummary {
    pub scope: ReportScope,
    pub period_start: NaiveDate,
    pub period_end: NaiveDate,
    pub school_days: u64,
    pub students: u64,
    /// students × school days: the number of records a closed period holds.
    pub student_days: u64,
    pub counts: StatusCounts,
    /// Student-days with no record yet (open days only, in a consistent store).
    pub pending: u64,
    /// (present + late) / student_days.
    pub attendance_rate: f64,
    /// late / (present + late).
    pub tardiness_rate: f64,
    /// Some school day in the period has not been closed.
    pub provisional: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Aggregates the active students in `scope` over the school days of
/// `period`. Events outside the scope, the period or the calendar are
/// ignored.
pub fn summarize<'a>(
    scope: &ReportScope,
    period: &Period,
    roster: &Roster,
    events: impl IntoIterator<Item = &'a AttendanceEvent>,
    calendar: &SchoolCalendar,
    is_closed: impl Fn(NaiveDate) -> bool,
) -> Result<AttendanceSummary, ReportError> {
    let (start, end) = period.bounds()?;
    let students: HashSet<&StudentCode> = roster
        .active()
        .filter(|s| scope.includes(s))
        .map(|s| &s.student_code)
        .collect();
    let days: BTreeSet<NaiveDate> = calendar.school_days(start, end).collect();
    let mut counts = StatusCounts::default();
    for e in events {
        if days.contains(&e.school_day) && students.contains(&e.student_code) {
            counts.record(e.status);
        }
    }
    let student_days = students.len() as u64 * days.len() as u64;
    let attended = counts.present + counts.late;
    Ok(AttendanceSummary {
        scope: scope.clone(),
        period_start: start,
        period_end: end,
        school_days: days.len() as u64,
        students: students.len() as u64,
        student_days,
        counts,
        pending: student_days.saturating_sub(counts.total()),
        attendance_rate: ratio(attended, student_days),
        tardiness_rate: ratio(counts.late, attended),
        provisional: days.iter().any(|d| !is_closed(*d)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChronicFlag {
    pub student: StudentCode,
    pub flagged: bool,
    pub threshold: f64,
    pub closed_school_days: u64,
    /// Days with an unjustified absence, in date order.
    pub absent_days: Vec<NaiveDate>,
    pub absence_rate: f64,
}

/// Flags `student` when unjustified absences reach `threshold` of the closed
/// school days in `from..=to`. Justified absences never count.
pub fn flag_chronic_absenteeism<'a>(
    student: &StudentCode,
    from: NaiveDate,
    to: NaiveDate,
    threshold: f64,
    events: impl IntoIterator<Item = &'a AttendanceEvent>,
    calendar: &SchoolCalendar,
    is_closed: impl Fn(NaiveDate) -> bool,
) -> Result<ChronicFlag, ReportError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ReportError::InvalidThreshold(threshold));
    }
    let (from, to) = Period::Range { from, to }.bounds()?;
    let closed: BTreeSet<NaiveDate> = calendar.school_days(from, to).filter(|d| is_closed(*d)).collect();
    if closed.len() < MIN_CHRONIC_WINDOW_DAYS {
        return Err(ReportError::WindowTooShort {
            closed_days: closed.len(),
        });
    }
    let absent_days: BTreeSet<NaiveDate> = events
        .into_iter()
        .filter(|e| {
            &e.student_code == student && e.status == AttendanceStatus::Absent && closed.contains(&e.school_day)
        })
        .map(|e| e.school_day)
        .collect();
    let absence_rate = ratio(absent_days.len() as u64, closed.len() as u64);
    Ok(ChronicFlag {
        student: student.clone(),
        flagged: absence_rate >= threshold,
        threshold,
        closed_school_days: closed.len() as u64,
        absent_days: absent_days.into_iter().collect(),
        absence_rate,
    })
}

/// Column order of the attendance CSV export.
pub const EVENT_CSV_HEADER: [&str; 11] = [
    "school_day",
    "student_code",
    "family_names",
    "given_names",
    "grade",
    "section",
    "status",
    "method",
    "recorded_at",
    "recorded_by",
    "event_id",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRow {
    pub school_day: NaiveDate,
    pub student_code: String,
    pub family_names: String,
    pub given_names: String,
    pub grade: u8,
    pub section: String,
    pub status: String,
    pub method: String,
    pub recorded_at: String,
    pub recorded_by: String,
    pub event_id: String,
}

impl EventRow {
    pub fn new(e: &AttendanceEvent, roster: &Roster) -> Self {
        let s = roster.get(&e.student_code);
        EventRow {
            school_day: e.school_day,
            student_code: e.student_code.to_string(),
            family_names: s.map(|s| s.family_names.clone()).unwrap_or_default(),
            given_names: s.map(|s| s.given_names.clone()).unwrap_or_default(),
            grade: e.student_code.grade(),
            section: e.student_code.section().to_string(),
            status: e.status.to_string(),
            method: e.method.to_string(),
            recorded_at: e.recorded_at.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true),
            recorded_by: e.recorded_by.clone().unwrap_or_default(),
            event_id: e.event_id.to_string(),
        }
    }
}

/// RFC 4180 CSV with a header row, even when `rows` is empty.
pub fn write_events_csv<'a, W: Write>(w: W, rows: impl IntoIterator<Item = &'a EventRow>) -> csv::Result<()> {
    let mut out = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::CRLF)
        .from_writer(w);
    out.write_record(EVENT_CSV_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub const SUMMARY_CSV_HEADER: [&str; 14] = [
    "scope",
    "period_start",
    "period_end",
    "school_days",
    "students",
    "student_days",
    "present",
    "late",
    "absent",
    "justified",
    "pending",
    "attendance_rate",
    "tardiness_rate",
    "provisional",
];

fn scope_label(s: &ReportScope) -> String {
    match s {
        ReportScope::Institution => "institution".into(),
        ReportScope::Grade { grade } => format!("grade:{grade}"),
        ReportScope::Section { grade, section } => format!("section:{grade}{section}"),
        ReportScope::Student { student } => format!("student:{student}"),
    }
}

pub fn write_summary_csv<'a, W: Write>(
    w: W,
    summaries: impl IntoIterator<Item = &'a AttendanceSummary>,
) -> csv::Result<()> {
    let mut out = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::CRLF)
        .from_writer(w);
    out.write_record(SUMMARY_CSV_HEADER)?;
    for s in summaries {
        out.write_record([
            scope_label(&s.scope),
            s.period_start.to_string(),
            s.period_end.to_string(),
            s.school_days.to_string(),
            s.students.to_string(),
            s.student_days.to_string(),
            s.counts.present.to_string(),
            s.counts.late.to_string(),
            s.counts.absent.to_string(),
            s.counts.justified.to_string(),
            s.pending.to_string(),
            format!("{:.6}", s.attendance_rate),
            format!("{:.6}", s.tardiness_rate),
            s.provisional.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CaptureMethod, NewStudent};
    use crate::ids::{IdSource, SeededIds};
    use chrono::{TimeZone, Utc};

    fn d(m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2025, m, day).unwrap()
    }

    fn one_student() -> (Roster, StudentCode) {
        let mut r = Roster::new();
        let s = r
            .add(NewStudent {
                given_names: "Rosa".into(),
                family_names: "Huanca, Apaza".into(),
                enrollment_year: 2025,
                grade: 2,
                section: 'B',
                emergency_contact: String::new(),
            })
            .unwrap();
        (r, s.student_code)
    }

    fn ev(ids: &mut SeededIds, s: &StudentCode, day: NaiveDate, status: AttendanceStatus) -> AttendanceEvent {
        let method = match status {
            AttendanceStatus::Present | AttendanceStatus::Late => CaptureMethod::Rfid,
            AttendanceStatus::Absent => CaptureMethod::SystemClosure,
            AttendanceStatus::Justified => CaptureMethod::Manual,
        };
        AttendanceEvent {
            event_id: ids.next_id(),
            student_code: s.clone(),
            school_day: day,
            status,
            recorded_at: Utc.from_utc_datetime(&day.and_hms_opt(12, 0, 0).unwrap()),
            method,
            recorded_by: (method == CaptureMethod::Manual).then(|| "aux".to_string()),
            edge_sequence: 0,
            supersedes: None,
        }
    }

    #[test]
    fn micro_week() {
        use AttendanceStatus::*;
        let (roster, s) = one_student();
        let mut ids = SeededIds::new(1);
        // Mon 10 March .. Fri 14 March 2025.
        let evs: Vec<_> = [Present, Present, Late, Absent, Justified]
            .into_iter()
            .enumerate()
            .map(|(i, st)| ev(&mut ids, &s, d(3, 10 + i as u32), st))
            .collect();
        let sum = summarize(
            &ReportScope::Student { student: s.clone() },
            &Period::Week { year: 2025, week: 11 },
            &roster,
            &evs,
            &SchoolCalendar::default(),
            |_| true,
        )
        .unwrap();
        assert_eq!(sum.school_days, 5);
        assert_eq!(sum.attendance_rate, 3.0 / 5.0);
        assert_eq!(sum.tardiness_rate, 1.0 / 3.0);
        assert_eq!(sum.counts.total(), sum.student_days);
        assert!(!sum.provisional);
    }

    #[test]
    fn empty_roster_is_all_zero() {
        let sum = summarize(
            &ReportScope::Institution,
            &Period::Month { year: 2025, month: 3 },
            &Roster::new(),
            &[],
            &SchoolCalendar::default(),
            |_| false,
        )
        .unwrap();
        assert_eq!(sum.counts, StatusCounts::default());
        assert_eq!((sum.student_days, sum.attendance_rate, sum.tardiness_rate), (0, 0.0, 0.0));
        assert_eq!(sum.school_days, 21);
    }

    #[test]
    fn period_bounds() {
        assert_eq!(Period::Week { year: 2025, week: 1 }.bounds().unwrap(), (NaiveDate::from_ymd_opt(2024, 12, 30).unwrap(), d(1, 5)));
        assert_eq!(Period::Month { year: 2025, month: 2 }.bounds().unwrap(), (d(2, 1), d(2, 28)));
        assert_eq!(Period::Month { year: 2025, month: 12 }.bounds().unwrap(), (d(12, 1), d(12, 31)));
        assert!(Period::Range { from: d(3, 2), to: d(3, 1) }.bounds().is_err());
        assert_eq!(Period::week_of(d(3, 12)), Period::Week { year: 2025, week: 11 });
    }

    #[test]
    fn chronic_flags() {
        let (_, s) = one_student();
        let mut ids = SeededIds::new(2);
        let cal = SchoolCalendar::default();
        let days: Vec<_> = cal.school_days(d(3, 3), d(3, 28)).collect();
        assert_eq!(days.len(), 20);
        let mut evs: Vec<_> = days.iter().map(|day| ev(&mut ids, &s, *day, AttendanceStatus::Present)).collect();
        let none = flag_chronic_absenteeism(&s, d(3, 3), d(3, 28), 0.10, &evs, &cal, |_| true).unwrap();
        assert!(!none.flagged);
        evs[3].status = AttendanceStatus::Absent;
        evs[7].status = AttendanceStatus::Absent;
        let two = flag_chronic_absenteeism(&s, d(3, 3), d(3, 28), 0.10, &evs, &cal, |_| true).unwrap();
        assert!(two.flagged);
        assert_eq!(two.absent_days, vec![days[3], days[7]]);
        evs[7].status = AttendanceStatus::Justified;
        let one = flag_chronic_absenteeism(&s, d(3, 3), d(3, 28), 0.10, &evs, &cal, |_| true).unwrap();
        assert!(!one.flagged);
        assert_eq!(
            flag_chronic_absenteeism(&s, d(3, 3), d(3, 7), 0.10, &evs, &cal, |_| true),
            Err(ReportError::WindowTooShort { closed_days: 5 })
        );
        assert!(flag_chronic_absenteeism(&s, d(3, 3), d(3, 28), 1.5, &evs, &cal, |_| true).is_err());
    }

    #[test]
    fn empty_export_is_header_only() {
        let mut buf = Vec::new();
        write_events_csv(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "school_day,student_code,family_names,given_names,grade,section,status,method,recorded_at,recorded_by,event_id\r\n"
        );
    }

    #[test]
    fn export_round_trips() {
        let (roster, s) = one_student();
        let mut ids = SeededIds::new(3);
        let evs = [
            ev(&mut ids, &s, d(3, 10), AttendanceStatus::Present),
            ev(&mut ids, &s, d(3, 11), AttendanceStatus::Justified),
        ];
        let rows: Vec<_> = evs.iter().map(|e| EventRow::new(e, &roster)).collect();
        let mut buf = Vec::new();
        write_events_csv(&mut buf, &rows).unwrap();
        let back: Vec<EventRow> = csv::Reader::from_reader(&buf[..]).deserialize().collect::<Result<_, _>>().unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[0].family_names, "Huanca, Apaza");
    }
}
