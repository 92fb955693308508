//! Instants, windows and local-calendar helpers.
//!
//! All instants are UTC. Civil time only appears when an algorithm asks for
//! it (night windows, calendar days), always through a [`Tz`].

use chrono::{DateTime, Duration, LocalResult, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Utc};
use chrono_tz::Tz;
use thiserror::Error;

pub type Timestamp = DateTime<Utc>;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TimeError {
    #[error("unparseable instant {0:?}")]
    Instant(String),
    #[error("local time {0} does not exist in {1}")]
    NonexistentLocal(String, String),
    #[error("unknown time zone {0:?}")]
    Zone(String),
    #[error("unparseable clock time {0:?} (expected HH:MM or HH:MM:SS)")]
    Clock(String),
}

/// Closed interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeWindow {
    pub fn new(start: Timestamp, end: Timestamp) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.start && t <= self.end
    }
}

/// Half-open interval `[start, end)`, used for aggregation periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Period {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Period {
    pub fn new(start: Timestamp, end: Timestamp) -> Self {
        Self { start, end }
    }

    pub fn days_from(start: Timestamp, days: i64) -> Self {
        Self {
            start,
            end: start + Duration::days(days),
        }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.start && t < self.end
    }
}

pub fn parse_tz(name: &str) -> Result<Tz, TimeError> {
    name.trim()
        .parse::<Tz>()
        .map_err(|_| TimeError::Zone(name.to_string()))
}

pub fn parse_clock(s: &str) -> Result<NaiveTime, TimeError> {
    let s = s.trim();
    NaiveTime::parse_from_str(s, "%H:%M:%S")
        .or_else(|_| NaiveTime::parse_from_str(s, "%H:%M"))
        .map_err(|_| TimeError::Clock(s.to_string()))
}

const NAIVE_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

fn parse_naive(s: &str) -> Option<NaiveDateTime> {
    NAIVE_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// ISO-8601 with an offset, or a bare date-time taken as UTC.
pub fn parse_utc(s: &str) -> Result<Timestamp, TimeError> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    parse_naive(s)
        .map(|n| n.and_utc())
        .ok_or_else(|| TimeError::Instant(s.to_string()))
}

/// ISO-8601 with an offset, or a bare date-time (or date) in local time `tz`.
pub fn parse_local(s: &str, tz: Tz) -> Result<Timestamp, TimeError> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    let naive = parse_naive(s)
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .map(|d| d.and_time(NaiveTime::MIN))
        })
        .ok_or_else(|| TimeError::Instant(s.to_string()))?;
    local_to_utc(naive, tz)
}

/// Resolves a local date-time; ambiguous times take the earlier instant.
pub fn local_to_utc(naive: NaiveDateTime, tz: Tz) -> Result<Timestamp, TimeError> {
    match tz.from_local_datetime(&naive) {
        LocalResult::Single(t) => Ok(t.with_timezone(&Utc)),
        LocalResult::Ambiguous(a, _) => Ok(a.with_timezone(&Utc)),
        LocalResult::None => Err(TimeError::NonexistentLocal(
            naive.to_string(),
            tz.name().to_string(),
        )),
    }
}

/// First instant of local calendar day `date`.
pub fn local_midnight(date: NaiveDate, tz: Tz) -> Timestamp {
    let mut t = date.and_time(NaiveTime::MIN);
    loop {
        if let Ok(ts) = local_to_utc(t, tz) {
            return ts;
        }
        // Midnight skipped by a DST jump; take the first valid minute.
        t += Duration::minutes(1);
    }
}

pub fn local_date(t: Timestamp, tz: Tz) -> NaiveDate {
    t.with_timezone(&tz).date_naive()
}

pub fn format_utc(t: Timestamp) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

pub fn format_opt(t: Option<Timestamp>) -> String {
    t.map(format_utc).unwrap_or_default()
}

pub fn days_between(a: Timestamp, b: Timestamp) -> f64 {
    (b - a).num_seconds() as f64 / SECONDS_PER_DAY
}

/// Local calendar dates having any part of `[start, end)`.
pub fn local_dates_between(start: Timestamp, end: Timestamp, tz: Tz) -> Vec<NaiveDate> {
    if end <= start {
        return Vec::new();
    }
    let first = local_date(start, tz);
    let last = local_date(end - Duration::seconds(1), tz);
    first.iter_days().take_while(|d| *d <= last).collect()
}
