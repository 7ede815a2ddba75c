use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{DelayEvent, DelayType, EventInvalid};
use crate::clock::parse_hhmm;
use crate::network::{Direction, Network};

pub const DELAY_TABLE_HEADER: [&str; 7] = ["Line", "Delay type", "No.", "Date", "Time", "Delay interval", "Direction"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayRejectReason {
    WrongFieldCount,
    MissingLine,
    UnknownDelayType,
    BadNumber,
    DuplicateNumber,
    MalformedDate,
    MalformedTime,
    InvertedWindow,
    MalformedInterval,
    BadDirection,
    UnknownLine,
    StationNotOnLine,
}

impl fmt::Display for DelayRejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayRejection {
    /// 1-based data row, header excluded.
    pub row: usize,
    pub reason: DelayRejectReason,
}

/// Parses the seven-column delay table. Blank `Line` and `Delay type` cells
/// repeat the value from the row above, as in a table with merged cells.
pub fn parse_structured_delays<R: Read>(
    source: R,
    network: Option<&Network>,
) -> Result<(Vec<DelayEvent>, Vec<DelayRejection>), csv::Error> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(source);
    let mut events = Vec::new();
    let mut rejected = Vec::new();
    let mut last_line: Option<String> = None;
    let mut last_type: Option<String> = None;
    let mut seen_ids = BTreeSet::new();

    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let row_no = i + 1;
        let fields: Vec<&str> = row.iter().map(str::trim).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        if fields.len() != 7 {
            rejected.push(DelayRejection { row: row_no, reason: DelayRejectReason::WrongFieldCount });
            continue;
        }
        if !fields[0].is_empty() {
            last_line = Some(fields[0].to_string());
        }
        if !fields[1].is_empty() {
            last_type = Some(fields[1].to_string());
        }
        match parse_row(&fields, last_line.as_deref(), last_type.as_deref(), network) {
            Ok(ev) if !seen_ids.insert(ev.event_id) => {
                rejected.push(DelayRejection { row: row_no, reason: DelayRejectReason::DuplicateNumber })
            }
            Ok(ev) => events.push(ev),
            Err(reason) => rejected.push(DelayRejection { row: row_no, reason }),
        }
    }
    Ok((events, rejected))
}

fn parse_row(
    f: &[&str],
    line: Option<&str>,
    delay_type: Option<&str>,
    network: Option<&Network>,
) -> Result<DelayEvent, DelayRejectReason> {
    use DelayRejectReason as R;
    let line = line.ok_or(R::MissingLine)?;
    let delay_type: DelayType = delay_type.ok_or(R::UnknownDelayType)?.parse().map_err(|_| R::UnknownDelayType)?;
    let event_id: u32 = f[2].parse().map_err(|_| R::BadNumber)?;
    let date = NaiveDate::parse_from_str(f[3], "%Y-%m-%d").map_err(|_| R::MalformedDate)?;
    let (start, end) = f[4].split_once('-').ok_or(R::MalformedTime)?;
    let start = parse_hhmm(start).ok_or(R::MalformedTime)?;
    let end = parse_hhmm(end).ok_or(R::MalformedTime)?;
    let parts: Vec<&str> = f[5].split('-').map(str::trim).collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(R::MalformedInterval);
    }
    let direction = Direction::parse(f[6]).ok_or(R::BadDirection)?;
    let ev = DelayEvent {
        event_id,
        line: line.to_string(),
        delay_type,
        date,
        start,
        end,
        from_station: parts[0].to_string(),
        to_station: parts[1].to_string(),
        direction,
    };
    ev.validate(network).map_err(|e| match e {
        EventInvalid::InvertedWindow { .. } => R::InvertedWindow,
        EventInvalid::UnknownLine(_) => R::UnknownLine,
        EventInvalid::StationNotOnLine { .. } => R::StationNotOnLine,
        EventInvalid::DegenerateInterval => R::MalformedInterval,
    })?;
    Ok(ev)
}

/// Writes events in table layout with every cell filled.
pub fn write_delay_table<W: Write>(events: &[DelayEvent], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DELAY_TABLE_HEADER)?;
    for e in events {
        w.write_record([
            e.line.clone(),
            e.delay_type.to_string(),
            e.event_id.to_string(),
            e.date.format("%Y-%m-%d").to_string(),
            format!("{}-{}", e.start.format("%H:%M"), e.end.format("%H:%M")),
            format!("{}-{}", e.from_station, e.to_station),
            e.direction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
