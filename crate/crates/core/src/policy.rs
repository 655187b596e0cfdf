//! Morning time-window policy and school calendar.

use std::collections::BTreeSet;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Utc, Weekday};
use chrono_tz::Tz;
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("window boundaries must satisfy present_start < late_start < closure")]
    UnorderedBoundaries,
}

/// Which calendar days are school days: a weekday set minus holidays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchoolCalendar {
    weekdays: [bool; 7],
    holidays: BTreeSet<NaiveDate>,
}

impl Default for SchoolCalendar {
    fn default() -> Self {
        SchoolCalendar {
            weekdays: [true, true, true, true, true, false, false],
            holidays: BTreeSet::new(),
        }
    }
}

impl SchoolCalendar {
    pub fn new(weekdays: impl IntoIterator<Item = Weekday>, holidays: impl IntoIterator<Item = NaiveDate>) -> Self {
        let mut days = [false; 7];
        for d in weekdays {
            days[d.num_days_from_monday() as usize] = true;
        }
        SchoolCalendar {
            weekdays: days,
            holidays: holidays.into_iter().collect(),
        }
    }

    pub fn is_school_day(&self, day: NaiveDate) -> bool {
        self.weekdays[day.weekday().num_days_from_monday() as usize] && !self.holidays.contains(&day)
    }

    pub fn add_holiday(&mut self, day: NaiveDate) {
        self.holidays.insert(day);
    }

    /// School days in `from..=to`.
    pub fn school_days(&self, from: NaiveDate, to: NaiveDate) -> impl Iterator<Item = NaiveDate> + '_ {
        from.iter_days().take_while(move |d| *d <= to).filter(|d| self.is_school_day(*d))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeWindowPolicy {
    present_start: NaiveTime,
    late_start: NaiveTime,
    closure: NaiveTime,
    timezone: Tz,
    calendar: SchoolCalendar,
}

pub const DEFAULT_TIMEZONE: Tz = chrono_tz::America::Lima;

fn hms(h: u32, m: u32, s: u32) -> NaiveTime {
    NaiveTime::from_hms_opt(h, m, s).expect("valid time")
}

impl Default for TimeWindowPolicy {
    /// 07:00 present, 08:01 late, 08:31 closure, Monday to Friday, Lima time.
    fn default() -> Self {
        TimeWindowPolicy {
            present_start: hms(7, 0, 0),
            late_start: hms(8, 1, 0),
            closure: hms(8, 31, 0),
            timezone: DEFAULT_TIMEZONE,
            calendar: SchoolCalendar::default(),
        }
    }
}

impl TimeWindowPolicy {
    pub fn new(
        present_start: NaiveTime,
        late_start: NaiveTime,
        closure: NaiveTime,
        timezone: Tz,
        calendar: SchoolCalendar,
    ) -> Result<Self, PolicyError> {
        if !(present_start < late_start && late_start < closure) {
            return Err(PolicyError::UnorderedBoundaries);
        }
        Ok(TimeWindowPolicy {
            present_start,
            late_start,
            closure,
            timezone,
            calendar,
        })
    }

    pub fn with_timezone(mut self, timezone: Tz) -> Self {
        self.timezone = timezone;
        self
    }

    pub fn with_calendar(mut self, calendar: SchoolCalendar) -> Self {
        self.calendar = calendar;
        self
    }

    pub fn present_start(&self) -> NaiveTime {
        self.present_start
    }

    pub fn late_start(&self) -> NaiveTime {
        self.late_start
    }

    pub fn closure(&self) -> NaiveTime {
        self.closure
    }

    pub fn timezone(&self) -> Tz {
        self.timezone
    }

    pub fn calendar(&self) -> &SchoolCalendar {
        &self.calendar
    }

    pub fn is_school_day(&self, day: NaiveDate) -> bool {
        self.calendar.is_school_day(day)
    }

    pub fn local(&self, now: DateTime<Utc>) -> NaiveDateTime {
        now.with_timezone(&self.timezone).naive_local()
    }

    pub fn local_day(&self, now: DateTime<Utc>) -> NaiveDate {
        self.local(now).date()
    }

    /// The instant a local wall-clock time occurs on `day`. For a time skipped
    /// by a DST jump the first instant after the gap is used.
    pub fn instant(&self, day: NaiveDate, time: NaiveTime) -> DateTime<Utc> {
        let local = day.and_time(time);
        match self.timezone.from_local_datetime(&local).earliest() {
            Some(t) => t.with_timezone(&Utc),
            None => {
                let shifted = local + chrono::Duration::hours(1);
                self.timezone
                    .from_local_datetime(&shifted)
                    .earliest()
                    .map(|t| t.with_timezone(&Utc))
                    .unwrap_or_else(|| Utc.from_utc_datetime(&local))
            }
        }
    }

    pub fn closure_instant(&self, day: NaiveDate) -> DateTime<Utc> {
        self.instant(day, self.closure)
    }

    /// Reads the policy keys from a config file, defaulting any that are absent.
    ///
    /// Keys: `timezone`, `present_start`, `late_start`, `closure` (HH:MM[:SS]),
    /// `school_weekdays` (e.g. `mon,tue,wed,thu,fri`), `holidays`
    /// (comma-separated YYYY-MM-DD).
    pub fn from_config(cfg: &KvConfig) -> Result<Self, ConfigError> {
        let d = TimeWindowPolicy::default();
        let timezone = cfg
            .get_with("timezone", |v| v.parse::<Tz>().map_err(|e| e.to_string()))?
            .unwrap_or(d.timezone);
        let present_start = cfg.get_with("present_start", parse_time)?.unwrap_or(d.present_start);
        let late_start = cfg.get_with("late_start", parse_time)?.unwrap_or(d.late_start);
        let closure = cfg.get_with("closure", parse_time)?.unwrap_or(d.closure);
        let weekdays = cfg
            .get_with("school_weekdays", |v| {
                v.split(',')
                    .map(|w| w.trim().parse::<Weekday>().map_err(|_| format!("unknown weekday {w:?}")))
                    .collect::<Result<Vec<_>, _>>()
            })?
            .unwrap_or_else(|| vec![Weekday::Mon, Weekday::Tue, Weekday::Wed, Weekday::Thu, Weekday::Fri]);
        let holidays = cfg
            .get_with("holidays", |v| {
                v.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| format!("{s:?}: {e}")))
                    .collect::<Result<Vec<_>, _>>()
            })?
            .unwrap_or_default();
        TimeWindowPolicy::new(
            present_start,
            late_start,
            closure,
            timezone,
            SchoolCalendar::new(weekdays, holidays),
        )
        .map_err(|e| ConfigError::Invalid {
            key: "closure".into(),
            origin: crate::config::Origin::Default,
            message: e.to_string(),
        })
    }
}

pub fn parse_time(v: &str) -> Result<NaiveTime, String> {
    NaiveTime::parse_from_str(v, "%H:%M:%S")
        .or_else(|_| NaiveTime::parse_from_str(v, "%H:%M"))
        .map_err(|_| format!("expected HH:MM or HH:MM:SS, got {v:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn defaults() {
        let p = TimeWindowPolicy::default();
        assert_eq!(p.present_start(), hms(7, 0, 0));
        assert_eq!(p.late_start(), hms(8, 1, 0));
        assert_eq!(p.closure(), hms(8, 31, 0));
        assert!(p.is_school_day(date(2025, 3, 10)));
        assert!(!p.is_school_day(date(2025, 3, 15)));
    }

    #[test]
    fn boundaries_must_be_ordered() {
        let err = TimeWindowPolicy::new(hms(8, 0, 0), hms(8, 0, 0), hms(9, 0, 0), DEFAULT_TIMEZONE, Default::default());
        assert_eq!(err, Err(PolicyError::UnorderedBoundaries));
    }

    #[test]
    fn lima_closure_instant() {
        let p = TimeWindowPolicy::default();
        let t = p.closure_instant(date(2025, 3, 10));
        assert_eq!(t.to_rfc3339(), "2025-03-10T13:31:00+00:00");
        assert_eq!(p.local_day(t), date(2025, 3, 10));
    }

    #[test]
    fn from_config_reads_holidays_and_times() {
        let cfg = KvConfig::parse(
            "timezone = UTC\npresent_start = 06:45\nholidays = 2025-03-10, 2025-03-11\nschool_weekdays = mon,tue,wed,thu,fri,sat\n",
        )
        .unwrap();
        let p = TimeWindowPolicy::from_config(&cfg).unwrap();
        assert_eq!(p.present_start(), hms(6, 45, 0));
        assert!(!p.is_school_day(date(2025, 3, 10)));
        assert!(p.is_school_day(date(2025, 3, 15)));
        assert_eq!(p.timezone(), chrono_tz::UTC);
    }

    #[test]
    fn from_config_rejects_bad_time() {
        let cfg = KvConfig::parse("\nlate_start = 8h\n").unwrap();
        let err = TimeWindowPolicy::from_config(&cfg).unwrap_err();
        assert!(err.to_string().starts_with("line 2"), "{err}");
    }
}
