//! Calendar months and local civil time.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// A calendar month, ordered and dense (`succ` is the next month).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Month(i32);

impl Month {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::InvalidInput(format!("month {month} outside 1..12")));
        }
        Ok(Month(year * 12 + month as i32 - 1))
    }

    pub fn from_date(d: NaiveDate) -> Self {
        Month(d.year() * 12 + d.month0() as i32)
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12)
    }

    /// 1-based month of year.
    pub fn month(self) -> u32 {
        self.0.rem_euclid(12) as u32 + 1
    }

    pub fn offset(self, n: i32) -> Month {
        Month(self.0 + n)
    }

    pub fn succ(self) -> Month {
        self.offset(1)
    }

    pub fn pred(self) -> Month {
        self.offset(-1)
    }

    /// Signed number of months from `other` to `self`.
    pub fn since(self, other: Month) -> i32 {
        self.0 - other.0
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year(), self.month(), 1).expect("valid month")
    }

    pub fn days(self) -> u32 {
        (self.succ().first_day() - self.first_day()).num_days() as u32
    }

    /// Inclusive range of months.
    pub fn range(start: Month, end: Month) -> impl Iterator<Item = Month> {
        (start.0..=end.0).map(Month)
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad month {s:?}, expected YYYY-MM"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        Month::new(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)
    }
}

impl Serialize for Month {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive month window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StudyWindow {
    pub start: Month,
    pub end: Month,
}

impl StudyWindow {
    pub fn new(start: Month, end: Month) -> Result<Self> {
        if end < start {
            return Err(Error::Config(format!("study window {start}..{end} is empty")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, m: Month) -> bool {
        self.start <= m && m <= self.end
    }

    pub fn months(&self) -> impl Iterator<Item = Month> {
        Month::range(self.start, self.end)
    }

    pub fn len(&self) -> usize {
        (self.end.since(self.start) + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Converts UTC epoch seconds into local civil time at a fixed offset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalClock {
    name: String,
    offset_s: i64,
}

impl LocalClock {
    pub fn utc() -> Self {
        Self {
            name: "UTC".into(),
            offset_s: 0,
        }
    }

    pub fn fixed(offset_s: i64) -> Self {
        let sign = if offset_s < 0 { '-' } else { '+' };
        let a = offset_s.abs();
        Self {
            name: format!("{sign}{:02}:{:02}", a / 3600, (a % 3600) / 60),
            offset_s,
        }
    }

    /// Accepts `UTC`, `America/Bogota`, or a fixed offset such as
    /// `-05:00`, `UTC-05:00` or `+0530`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "UTC" | "Z" | "Etc/UTC" | "GMT" => return Ok(Self::utc()),
            // Colombia has observed UTC-5 without daylight saving since 1993.
            "America/Bogota" => {
                return Ok(Self {
                    name: s.into(),
                    offset_s: -5 * 3600,
                })
            }
            _ => {}
        }
        let bad = || Error::Config(format!("unsupported timezone {s:?}"));
        let rest = s.strip_prefix("UTC").unwrap_or(s);
        let (sign, digits) = match rest.as_bytes().first() {
            Some(b'+') => (1, &rest[1..]),
            Some(b'-') => (-1, &rest[1..]),
            _ => return Err(bad()),
        };
        let (h, m) = match digits.split_once(':') {
            Some((h, m)) => (h, m),
            None if digits.len() == 4 => digits.split_at(2),
            None => (digits, "0"),
        };
        let h: i64 = h.parse().map_err(|_| bad())?;
        let m: i64 = m.parse().map_err(|_| bad())?;
        if h > 14 || m >= 60 {
            return Err(bad());
        }
        let mut clock = Self::fixed(sign * (h * 3600 + m * 60));
        clock.name = s.into();
        Ok(clock)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn offset_seconds(&self) -> i64 {
        self.offset_s
    }

    /// Local day number (days since 1970-01-01 in local time).
    #[inline]
    pub fn day_number(&self, t: i64) -> i64 {
        (t + self.offset_s).div_euclid(SECONDS_PER_DAY)
    }

    /// Seconds since local midnight.
    #[inline]
    pub fn second_of_day(&self, t: i64) -> i64 {
        (t + self.offset_s).rem_euclid(SECONDS_PER_DAY)
    }

    pub fn local_datetime(&self, t: i64) -> NaiveDateTime {
        DateTime::from_timestamp(t + self.offset_s, 0)
            .expect("timestamp in range")
            .naive_utc()
    }

    pub fn date(&self, t: i64) -> NaiveDate {
        date_of_day_number(self.day_number(t))
    }

    pub fn month_of(&self, t: i64) -> Month {
        Month::from_date(self.date(t))
    }

    /// UTC epoch of local midnight starting `date`.
    pub fn midnight_utc(&self, date: NaiveDate) -> i64 {
        day_number_of_date(date) * SECONDS_PER_DAY - self.offset_s
    }

    /// UTC epoch seconds bounding the window: `[start, end)`.
    pub fn window_bounds(&self, window: &StudyWindow) -> (i64, i64) {
        (
            self.midnight_utc(window.start.first_day()),
            self.midnight_utc(window.end.succ().first_day()),
        )
    }
}

pub fn date_of_day_number(days: i64) -> NaiveDate {
    NaiveDate::from_num_days_from_ce_opt((days + 719_163) as i32).expect("date in range")
}

pub fn day_number_of_date(d: NaiveDate) -> i64 {
    d.num_days_from_ce() as i64 - 719_163
}

/// Daily night interval `[start, end)` that wraps midnight, expressed in
/// local seconds of day.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NightWindow {
    pub start_s: i64,
    pub end_s: i64,
}

impl Default for NightWindow {
    fn default() -> Self {
        Self {
            start_s: 22 * 3600 + 30 * 60,
            end_s: 5 * 3600 + 30 * 60,
        }
    }
}

impl NightWindow {
    /// Local day number of the evening that anchors the night containing
    /// `t`, or `None` outside the night window.
    #[inline]
    pub fn anchor_day(&self, clock: &LocalClock, t: i64) -> Option<i64> {
        let sod = clock.second_of_day(t);
        let day = clock.day_number(t);
        if sod >= self.start_s {
            Some(day)
        } else if sod < self.end_s {
            Some(day - 1)
        } else {
            None
        }
    }
}

/// Parses an ISO-8601 UTC timestamp (`2018-12-01T13:45:02Z`, also with an
/// explicit offset) into epoch seconds.
pub fn parse_iso8601(s: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .ok()
        .map(|dt| dt.and_utc().timestamp())
}

pub fn format_iso8601(t: i64) -> String {
    DateTime::from_timestamp(t, 0)
        .expect("timestamp in range")
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}
