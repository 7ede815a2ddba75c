//! Time-of-day helpers. Minutes-of-day are `f64` on a linear 0..1440 axis.

use chrono::{NaiveDateTime, NaiveTime, Timelike};

pub fn minutes_of_day(t: NaiveTime) -> f64 {
    t.num_seconds_from_midnight() as f64 / 60.0
}

pub fn datetime_minutes(dt: NaiveDateTime) -> f64 {
    minutes_of_day(dt.time())
}

/// Parses `HH:MM` or `H:MM`.
pub fn parse_hhmm(s: &str) -> Option<NaiveTime> {
    NaiveTime::parse_from_str(s.trim(), "%H:%M").ok()
}

pub fn format_hhmm(t: NaiveTime) -> String {
    t.format("%H:%M").to_string()
}

/// Formats fractional minutes-of-day as `HH:MM:SS`, rounding to the second.
pub fn format_minutes(m: f64) -> String {
    let secs = (m * 60.0).round().clamp(0.0, 86_399.0) as u32;
    format!("{:02}:{:02}:{:02}", secs / 3600, (secs / 60) % 60, secs % 60)
}

/// Closed-interval intersection on the minutes axis.
pub fn intervals_intersect(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Serde adapter for `NaiveTime` as `HH:MM`.
pub mod serde_hhmm {
    use chrono::NaiveTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &NaiveTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.format("%H:%M").to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveTime, D::Error> {
        let s = String::deserialize(d)?;
        NaiveTime::parse_from_str(s.trim(), "%H:%M").map_err(serde::de::Error::custom)
    }
}
