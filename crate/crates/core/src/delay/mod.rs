//! Delay events: the structured delay table and free-text narrative extraction.

mod extract;
mod table;

pub use extract::{extract_from_log, split_narratives, ExtractBackend, ExtractError, EXTRACTION_FIELDS};
pub use table::{parse_structured_delays, write_delay_table, DelayRejection, DelayRejectReason, DELAY_TABLE_HEADER};

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{Direction, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DelayType {
    #[serde(rename = "Vehicle Fault")]
    VehicleFault,
    #[serde(rename = "Signaling Fault")]
    SignalingFault,
    #[serde(rename = "Power Fault")]
    PowerFault,
    #[serde(rename = "Improper Operation")]
    ImproperOperation,
    #[serde(rename = "Others")]
    Others,
}

impl DelayType {
    pub const ALL: [DelayType; 5] = [
        DelayType::VehicleFault,
        DelayType::SignalingFault,
        DelayType::PowerFault,
        DelayType::ImproperOperation,
        DelayType::Others,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DelayType::VehicleFault => "Vehicle Fault",
            DelayType::SignalingFault => "Signaling Fault",
            DelayType::PowerFault => "Power Fault",
            DelayType::ImproperOperation => "Improper Operation",
            DelayType::Others => "Others",
        }
    }
}

impl fmt::Display for DelayType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DelayType {
    type Err = String;

    /// Accepts the table spelling ("Signaling Fault") and the compact
    /// identifier spelling ("SignalingFault"), case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        let t = match norm.as_str() {
            "vehiclefault" => DelayType::VehicleFault,
            "signalingfault" | "signallingfault" => DelayType::SignalingFault,
            "powerfault" => DelayType::PowerFault,
            "improperoperation" => DelayType::ImproperOperation,
            "others" | "other" => DelayType::Others,
            _ => return Err(format!("unknown delay type {s:?}")),
        };
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DelayEvent {
    pub event_id: u32,
    pub line: String,
    pub delay_type: DelayType,
    pub date: NaiveDate,
    #[serde(with = "crate::clock::serde_hhmm")]
    pub start: NaiveTime,
    #[serde(with = "crate::clock::serde_hhmm")]
    pub end: NaiveTime,
    /// Interval endpoints as written; the pair is unordered, travel direction
    /// is carried by `direction`.
    pub from_station: String,
    pub to_station: String,
    pub direction: Direction,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EventInvalid {
    #[error("window end {end} is not after start {start}")]
    InvertedWindow { start: NaiveTime, end: NaiveTime },
    #[error("unknown line {0}")]
    UnknownLine(String),
    #[error("station {station} is not on {line}")]
    StationNotOnLine { line: String, station: String },
    #[error("interval endpoints are the same station")]
    DegenerateInterval,
}

impl DelayEvent {
    pub fn start_minutes(&self) -> f64 {
        crate::clock::minutes_of_day(self.start)
    }

    pub fn end_minutes(&self) -> f64 {
        crate::clock::minutes_of_day(self.end)
    }

    pub fn duration_minutes(&self) -> f64 {
        self.end_minutes() - self.start_minutes()
    }

    pub fn validate(&self, network: Option<&Network>) -> Result<(), EventInvalid> {
        if self.end <= self.start {
            return Err(EventInvalid::InvertedWindow { start: self.start, end: self.end });
        }
        if self.from_station == self.to_station {
            return Err(EventInvalid::DegenerateInterval);
        }
        if let Some(net) = network {
            let line = net.line(&self.line).ok_or_else(|| EventInvalid::UnknownLine(self.line.clone()))?;
            for s in [&self.from_station, &self.to_station] {
                let on_line = net.station_id(s).is_some_and(|id| line.position(id).is_some());
                if !on_line {
                    return Err(EventInvalid::StationNotOnLine { line: self.line.clone(), station: s.clone() });
                }
            }
        }
        Ok(())
    }

    /// Stations of the affected interval in line order, inclusive.
    pub fn interval_positions(&self, network: &Network) -> Option<(usize, usize)> {
        let line = network.line(&self.line)?;
        let a = line.position(network.station_id(&self.from_station)?)?;
        let b = line.position(network.station_id(&self.to_station)?)?;
        Some((a.min(b), a.max(b)))
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        format!(
            "Delay event #{}: {} on {}, {} {}-{}, interval {} to {}, {} direction",
            self.event_id,
            self.delay_type,
            self.line,
            self.date.format("%Y-%m-%d"),
            self.start.format("%H:%M"),
            self.end.format("%H:%M"),
            self.from_station,
            self.to_station,
            self.direction
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Rule,
    Llm,
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub event: DelayEvent,
    pub confidence: f64,
    pub provenance: BTreeMap<String, Provenance>,
    /// Low-confidence notes, e.g. an end time taken from fault resolution.
    #[serde(default)]
    pub flags: Vec<String>,
}

impl ExtractionResult {
    pub fn from_table(event: DelayEvent) -> Self {
        let provenance = EXTRACTION_FIELDS.iter().map(|f| (f.to_string(), Provenance::Table)).collect();
        ExtractionResult { event, confidence: 1.0, provenance, flags: Vec::new() }
    }

    pub fn is_flagged(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut out: W) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(source: R) -> std::io::Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delay_type_spellings() {
        for t in DelayType::ALL {
            assert_eq!(t.as_str().parse::<DelayType>().unwrap(), t);
            assert_eq!(format!("{t:?}").parse::<DelayType>().unwrap(), t);
        }
        assert!("Meteor Strike".parse::<DelayType>().is_err());
    }

    #[test]
    fn event_json_round_trip() {
        let e = DelayEvent {
            event_id: 12,
            line: "Line 5".into(),
            delay_type: DelayType::Others,
            date: NaiveDate::from_ymd_opt(2019, 8, 20).unwrap(),
            start: NaiveTime::from_hms_opt(7, 50, 0).unwrap(),
            end: NaiveTime::from_hms_opt(8, 36, 0).unwrap(),
            from_station: "Minzhi".into(),
            to_station: "Qianwan Park".into(),
            direction: Direction::Down,
        };
        let r = ExtractionResult::from_table(e);
        let mut buf = Vec::new();
        write_jsonl(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"start\":\"07:50\""));
        assert!(text.contains("\"delay_type\":\"Others\""));
        let back: Vec<ExtractionResult> = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, vec![r]);
    }
}
