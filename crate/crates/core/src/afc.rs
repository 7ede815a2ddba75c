//! AFC transaction parsing and per-card trip reconstruction.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const AFC_HEADER: [&str; 5] = [
    "ID",
    "Transaction Date and Time",
    "Transaction Type",
    "Company",
    "Line/Station",
];

const TIMESTAMP_FORMAT: &str = "%Y%m%d%H%M%S";
const TRIP_TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Error)]
pub enum AfcError {
    #[error("unreadable AFC source: {0}")]
    Source(String),
    #[error("malformed calendar: {0}")]
    Calendar(String),
    #[error("malformed trip file: {0}")]
    Trips(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxnType {
    MetroEntry,
    MetroExit,
    Bus,
    BusQr,
}

impl TxnType {
    pub fn from_source(s: &str) -> Option<TxnType> {
        match s.trim() {
            "Metro (Entry)" => Some(TxnType::MetroEntry),
            "Metro (Exit)" => Some(TxnType::MetroExit),
            "Bus" => Some(TxnType::Bus),
            "Bus QR Code" => Some(TxnType::BusQr),
            _ => None,
        }
    }

    pub fn source_str(self) -> &'static str {
        match self {
            TxnType::MetroEntry => "Metro (Entry)",
            TxnType::MetroExit => "Metro (Exit)",
            TxnType::Bus => "Bus",
            TxnType::BusQr => "Bus QR Code",
        }
    }

    pub fn is_metro(self) -> bool {
        matches!(self, TxnType::MetroEntry | TxnType::MetroExit)
    }

    pub fn is_bus(self) -> bool {
        !self.is_metro()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AfcRecord {
    pub card_id: String,
    pub timestamp: NaiveDateTime,
    pub txn_type: TxnType,
    pub operator: String,
    /// Station name for metro taps, route for bus taps.
    pub location: String,
}

impl AfcRecord {
    fn sort_key(&self) -> (&str, NaiveDateTime, TxnType, &str, &str) {
        (&self.card_id, self.timestamp, self.txn_type, &self.location, &self.operator)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    WrongFieldCount,
    MalformedTimestamp,
    UnknownTransactionType,
    EmptyField,
    NonWeekday,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::WrongFieldCount => "wrong-field-count",
            RejectReason::MalformedTimestamp => "malformed-timestamp",
            RejectReason::UnknownTransactionType => "unknown-transaction-type",
            RejectReason::EmptyField => "empty-field",
            RejectReason::NonWeekday => "non-weekday",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based data row number, header excluded.
    pub row: usize,
    pub reason: RejectReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    UnmatchedEntry,
    UnmatchedExit,
    OverlongTrip,
    NonPositiveDuration,
    SameStationExit,
}

impl AnomalyKind {
    /// Metro records consumed by an anomaly of this kind. Same-station exits
    /// are flags on an accepted trip and consume nothing of their own.
    pub fn records_consumed(self) -> usize {
        match self {
            AnomalyKind::UnmatchedEntry | AnomalyKind::UnmatchedExit => 1,
            AnomalyKind::OverlongTrip | AnomalyKind::NonPositiveDuration => 2,
            AnomalyKind::SameStationExit => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomaly {
    pub card_id: String,
    pub kind: AnomalyKind,
    pub timestamp: NaiveDateTime,
    pub station: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub input_rows: usize,
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    pub anomalies: Vec<Anomaly>,
}

impl IngestReport {
    pub fn rejected_count(&self) -> usize {
        self.rejected.len()
    }

    pub fn reject_counts(&self) -> BTreeMap<RejectReason, usize> {
        let mut out = BTreeMap::new();
        for r in &self.rejected {
            *out.entry(r.reason).or_insert(0) += 1;
        }
        out
    }

    pub fn anomaly_counts(&self) -> BTreeMap<AnomalyKind, usize> {
        let mut out = BTreeMap::new();
        for a in &self.anomalies {
            *out.entry(a.kind).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DayKind {
    Weekday,
    Excluded,
}

/// Dates tagged weekday or excluded. Dates absent from the table are not
/// weekdays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Calendar {
    days: BTreeMap<NaiveDate, DayKind>,
}

impl Calendar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, date: NaiveDate, kind: DayKind) {
        self.days.insert(date, kind);
    }

    /// Every Monday..Friday in `[from, to]` is a weekday unless listed in
    /// `excluded`; everything else in range is excluded.
    pub fn weekdays_between(from: NaiveDate, to: NaiveDate, excluded: &[NaiveDate]) -> Self {
        let mut cal = Calendar::new();
        let mut d = from;
        while d <= to {
            let weekend = matches!(d.weekday(), Weekday::Sat | Weekday::Sun);
            let kind = if weekend || excluded.contains(&d) { DayKind::Excluded } else { DayKind::Weekday };
            cal.insert(d, kind);
            d = d.succ_opt().expect("date in range");
        }
        cal
    }

    pub fn is_weekday(&self, date: NaiveDate) -> bool {
        self.days.get(&date) == Some(&DayKind::Weekday)
    }

    pub fn weekdays(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.days.iter().filter(|(_, k)| **k == DayKind::Weekday).map(|(d, _)| *d)
    }

    pub fn read<R: Read>(source: R) -> Result<Self, AfcError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
        let mut cal = Calendar::new();
        for row in rdr.records() {
            let row = row.map_err(|e| AfcError::Calendar(e.to_string()))?;
            let date = row.get(0).unwrap_or("");
            let kind = row.get(1).unwrap_or("");
            let date = NaiveDate::parse_from_str(date.trim(), "%Y-%m-%d")
                .map_err(|_| AfcError::Calendar(format!("bad date {date:?}")))?;
            let kind = match kind.trim().to_ascii_lowercase().as_str() {
                "weekday" => DayKind::Weekday,
                "excluded" | "holiday" | "weekend" => DayKind::Excluded,
                other => return Err(AfcError::Calendar(format!("bad day kind {other:?}"))),
            };
            cal.insert(date, kind);
        }
        Ok(cal)
    }

    pub fn load(path: &Path) -> Result<Self, AfcError> {
        let f = std::fs::File::open(path).map_err(|e| AfcError::Calendar(format!("{}: {e}", path.display())))?;
        Self::read(f)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), AfcError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "kind"]).map_err(csv_io)?;
        for (d, k) in &self.days {
            let kind = match k {
                DayKind::Weekday => "weekday",
                DayKind::Excluded => "excluded",
            };
            w.write_record([d.format("%Y-%m-%d").to_string().as_str(), kind]).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> AfcError {
    AfcError::Io(std::io::Error::other(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct ParseOptions {
    pub delimiter: u8,
    /// Drop rows whose date is not a calendar weekday.
    pub weekday_filter: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { delimiter: b',', weekday_filter: true }
    }
}

fn parse_row(fields: &[&str]) -> Result<AfcRecord, RejectReason> {
    if fields.len() != 5 {
        return Err(RejectReason::WrongFieldCount);
    }
    if fields.iter().any(|f| f.trim().is_empty()) {
        return Err(RejectReason::EmptyField);
    }
    let ts = fields[1].trim();
    if ts.len() != 14 || !ts.bytes().all(|b| b.is_ascii_digit()) {
        return Err(RejectReason::MalformedTimestamp);
    }
    let timestamp =
        NaiveDateTime::parse_from_str(ts, TIMESTAMP_FORMAT).map_err(|_| RejectReason::MalformedTimestamp)?;
    let txn_type = TxnType::from_source(fields[2]).ok_or(RejectReason::UnknownTransactionType)?;
    Ok(AfcRecord {
        card_id: fields[0].trim().to_string(),
        timestamp,
        txn_type,
        operator: fields[3].trim().to_string(),
        location: fields[4].trim().to_string(),
    })
}

/// Parses an AFC stream in the five-column fare-collection layout. A header
/// row, if present, is skipped. Malformed rows are rejected with a reason and
/// never abort the batch.
pub fn parse_afc<R: Read>(
    source: R,
    calendar: Option<&Calendar>,
    opts: &ParseOptions,
) -> Result<(Vec<AfcRecord>, IngestReport), AfcError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(opts.delimiter)
        .from_reader(source);

    let mut records = Vec::new();
    let mut report = IngestReport::default();
    let mut first = true;
    for row in rdr.records() {
        let row = row.map_err(|e| AfcError::Source(e.to_string()))?;
        let fields: Vec<&str> = row.iter().collect();
        if std::mem::take(&mut first) && fields.first().map(|f| f.trim()) == Some(AFC_HEADER[0]) {
            continue;
        }
        report.input_rows += 1;
        let parsed = parse_row(&fields).and_then(|rec| match calendar {
            Some(cal) if opts.weekday_filter && !cal.is_weekday(rec.timestamp.date()) => {
                Err(RejectReason::NonWeekday)
            }
            _ => Ok(rec),
        });
        match parsed {
            Ok(rec) => records.push(rec),
            Err(reason) => report.rejected.push(Rejection { row: report.input_rows, reason }),
        }
    }
    report.accepted = records.len();
    Ok((records, report))
}

pub fn load_afc(
    path: &Path,
    calendar: Option<&Calendar>,
    opts: &ParseOptions,
) -> Result<(Vec<AfcRecord>, IngestReport), AfcError> {
    let f = std::fs::File::open(path).map_err(|e| AfcError::Source(format!("{}: {e}", path.display())))?;
    parse_afc(std::io::BufReader::new(f), calendar, opts)
}

pub fn write_afc<W: Write>(records: &[AfcRecord], out: W) -> Result<(), AfcError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AFC_HEADER).map_err(csv_io)?;
    for r in records {
        w.write_record([
            r.card_id.as_str(),
            &r.timestamp.format(TIMESTAMP_FORMAT).to_string(),
            r.txn_type.source_str(),
            &r.operator,
            &r.location,
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Trip {
    pub card_id: String,
    pub origin: String,
    pub entry_time: NaiveDateTime,
    pub dest: String,
    pub exit_time: NaiveDateTime,
}

impl Trip {
    pub fn duration_minutes(&self) -> f64 {
        (self.exit_time - self.entry_time).num_seconds() as f64 / 60.0
    }

    pub fn is_same_station(&self) -> bool {
        self.origin == self.dest
    }

    pub fn date(&self) -> NaiveDate {
        self.entry_time.date()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ReconstructParams {
    pub max_trip_duration: f64,
}

impl Default for ReconstructParams {
    fn default() -> Self {
        ReconstructParams { max_trip_duration: 240.0 }
    }
}

/// Pairs each MetroEntry with the card's next MetroExit. Bus taps are never
/// consumed. Output trips are sorted by (card, entry time).
pub fn reconstruct_trips(records: &[AfcRecord], params: ReconstructParams) -> (Vec<Trip>, Vec<Anomaly>) {
    let mut metro: Vec<&AfcRecord> = records.iter().filter(|r| r.txn_type.is_metro()).collect();
    metro.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));

    let mut trips = Vec::new();
    let mut anomalies = Vec::new();
    let anomaly = |r: &AfcRecord, kind| Anomaly {
        card_id: r.card_id.clone(),
        kind,
        timestamp: r.timestamp,
        station: r.location.clone(),
    };

    let mut pending: Option<&AfcRecord> = None;
    for (i, rec) in metro.iter().enumerate() {
        match rec.txn_type {
            TxnType::MetroEntry => {
                if let Some(p) = pending.replace(rec) {
                    anomalies.push(anomaly(p, AnomalyKind::UnmatchedEntry));
                }
            }
            TxnType::MetroExit => match pending.take() {
                None => anomalies.push(anomaly(rec, AnomalyKind::UnmatchedExit)),
                Some(entry) => {
                    let trip = Trip {
                        card_id: entry.card_id.clone(),
                        origin: entry.location.clone(),
                        entry_time: entry.timestamp,
                        dest: rec.location.clone(),
                        exit_time: rec.timestamp,
                    };
                    let d = trip.duration_minutes();
                    if d <= 0.0 {
                        anomalies.push(anomaly(entry, AnomalyKind::NonPositiveDuration));
                    } else if d > params.max_trip_duration {
                        anomalies.push(anomaly(entry, AnomalyKind::OverlongTrip));
                    } else {
                        if trip.is_same_station() {
                            anomalies.push(anomaly(rec, AnomalyKind::SameStationExit));
                        }
                        trips.push(trip);
                    }
                }
            },
            TxnType::Bus | TxnType::BusQr => unreachable!("filtered"),
        }
        let card_ends = metro.get(i + 1).is_none_or(|n| n.card_id != rec.card_id);
        if card_ends {
            if let Some(p) = pending.take() {
                anomalies.push(anomaly(p, AnomalyKind::UnmatchedEntry));
            }
        }
    }
    (trips, anomalies)
}

const TRIP_HEADER: [&str; 6] = ["card_id", "origin", "entry_time", "dest", "exit_time", "duration_min"];

pub fn write_trips<W: Write>(trips: &[Trip], out: W) -> Result<(), AfcError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIP_HEADER).map_err(csv_io)?;
    for t in trips {
        w.write_record([
            t.card_id.as_str(),
            &t.origin,
            &t.entry_time.format(TRIP_TIME_FORMAT).to_string(),
            &t.dest,
            &t.exit_time.format(TRIP_TIME_FORMAT).to_string(),
            &format!("{:.2}", t.duration_minutes()),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trips<R: Read>(source: R) -> Result<Vec<Trip>, AfcError> {
    let mut rdr = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| AfcError::Trips(e.to_string()))?;
        let get = |i: usize| row.get(i).ok_or_else(|| AfcError::Trips(format!("missing column {i}")));
        let time = |s: &str| {
            NaiveDateTime::parse_from_str(s, TRIP_TIME_FORMAT).map_err(|_| AfcError::Trips(format!("bad time {s:?}")))
        };
        out.push(Trip {
            card_id: get(0)?.to_string(),
            origin: get(1)?.to_string(),
            entry_time: time(get(2)?)?,
            dest: get(3)?.to_string(),
            exit_time: time(get(4)?)?,
        });
    }
    Ok(out)
}

/// Distinct card ids in first-seen order.
pub fn card_ids(records: &[AfcRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.card_id.as_str()))
        .map(|r| r.card_id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dt(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").unwrap()
    }

    fn rec(card: &str, ts: &str, t: TxnType, loc: &str) -> AfcRecord {
        AfcRecord {
            card_id: card.into(),
            timestamp: dt(ts),
            txn_type: t,
            operator: "Line 5".into(),
            location: loc.into(),
        }
    }

    #[test]
    fn parses_fare_collection_rows() {
        let src = "ID|Transaction Date and Time|Transaction Type|Company|Line/Station\n\
                   6878***27|20190915190008|Metro (Entry)|Line 5|Changlong\n\
                   3230***96|20190915200725|Bus|Bus Group|M429\n\
                   022*****98|20190914164700|Bus QR Code|Eastern Bus|M429\n";
        let opts = ParseOptions { delimiter: b'|', weekday_filter: false };
        let (recs, report) = parse_afc(src.as_bytes(), None, &opts).unwrap();
        assert_eq!(report.input_rows, 3);
        assert_eq!(report.accepted, 3);
        assert_eq!(
            recs[0],
            AfcRecord {
                card_id: "6878***27".into(),
                timestamp: dt("2019-09-15 19:00:08"),
                txn_type: TxnType::MetroEntry,
                operator: "Line 5".into(),
                location: "Changlong".into(),
            }
        );
        assert_eq!(recs[1].txn_type, TxnType::Bus);
        assert_eq!(recs[2].txn_type, TxnType::BusQr);
    }

    #[test]
    fn empty_source() {
        let (recs, report) = parse_afc("".as_bytes(), None, &ParseOptions::default()).unwrap();
        assert!(recs.is_empty());
        assert_eq!((report.accepted, report.rejected_count()), (0, 0));
    }

    #[test]
    fn rejects_bad_rows_without_aborting() {
        let src = "c1,20191345250000,Metro (Entry),Line 5,A\n\
                   c1,20190902080000,Metro (Teleport),Line 5,A\n\
                   c1,20190902080000,Metro (Entry),Line 5\n\
                   c1,20190902080000,Metro (Entry),Line 5,A\n";
        let opts = ParseOptions { weekday_filter: false, ..Default::default() };
        let (recs, report) = parse_afc(src.as_bytes(), None, &opts).unwrap();
        assert_eq!(recs.len(), 1);
        let reasons: Vec<_> = report.rejected.iter().map(|r| r.reason).collect();
        assert_eq!(
            reasons,
            vec![
                RejectReason::MalformedTimestamp,
                RejectReason::UnknownTransactionType,
                RejectReason::WrongFieldCount
            ]
        );
        assert_eq!(report.accepted + report.rejected_count(), report.input_rows);
    }

    #[test]
    fn weekday_filter() {
        let cal = Calendar::weekdays_between(
            NaiveDate::from_ymd_opt(2019, 9, 13).unwrap(),
            NaiveDate::from_ymd_opt(2019, 9, 16).unwrap(),
            &[],
        );
        let src = "c1,20190913080000,Metro (Entry),L,A\nc1,20190915080000,Metro (Entry),L,A\n";
        let (recs, report) = parse_afc(src.as_bytes(), Some(&cal), &ParseOptions::default()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(report.rejected[0], Rejection { row: 2, reason: RejectReason::NonWeekday });
    }

    #[test]
    fn calendar_round_trip() {
        let cal = Calendar::weekdays_between(
            NaiveDate::from_ymd_opt(2019, 8, 1).unwrap(),
            NaiveDate::from_ymd_opt(2019, 9, 30).unwrap(),
            &[NaiveDate::from_ymd_opt(2019, 8, 26).unwrap()],
        );
        assert_eq!(cal.weekdays().count(), 42);
        let mut buf = Vec::new();
        cal.write(&mut buf).unwrap();
        assert_eq!(Calendar::read(buf.as_slice()).unwrap(), cal);
    }

    #[test]
    fn simple_trip() {
        let recs = vec![
            rec("c", "2019-09-02 08:00:00", TxnType::MetroEntry, "A"),
            rec("c", "2019-09-02 08:20:00", TxnType::MetroExit, "B"),
        ];
        let (trips, anomalies) = reconstruct_trips(&recs, ReconstructParams::default());
        assert_eq!(trips.len(), 1);
        assert_eq!(trips[0].duration_minutes(), 20.0);
        assert!(anomalies.is_empty());
    }

    #[test]
    fn unmatched_exit() {
        let recs = vec![rec("c", "2019-09-02 08:20:00", TxnType::MetroExit, "B")];
        let (trips, anomalies) = reconstruct_trips(&recs, ReconstructParams::default());
        assert!(trips.is_empty());
        assert_eq!(anomalies[0].kind, AnomalyKind::UnmatchedExit);
    }

    #[test]
    fn overlong_and_same_station() {
        let recs = vec![
            rec("c", "2019-09-02 06:00:00", TxnType::MetroEntry, "A"),
            rec("c", "2019-09-02 11:00:00", TxnType::MetroExit, "B"),
            rec("c", "2019-09-02 12:00:00", TxnType::MetroEntry, "A"),
            rec("c", "2019-09-02 12:10:00", TxnType::MetroExit, "A"),
            rec("c", "2019-09-02 12:30:00", TxnType::Bus, "M429"),
            rec("c", "2019-09-02 13:00:00", TxnType::MetroEntry, "A"),
        ];
        let (trips, anomalies) = reconstruct_trips(&recs, ReconstructParams::default());
        assert_eq!(trips.len(), 1);
        assert!(trips[0].is_same_station());
        let kinds: Vec<_> = anomalies.iter().map(|a| a.kind).collect();
        assert_eq!(
            kinds,
            vec![AnomalyKind::OverlongTrip, AnomalyKind::SameStationExit, AnomalyKind::UnmatchedEntry]
        );
    }

    /// Independent oracle: group by card, sort each group, scan.
    fn group_then_scan(records: &[AfcRecord], max: f64) -> Vec<Trip> {
        let mut by_card: BTreeMap<&str, Vec<&AfcRecord>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.txn_type.is_metro()) {
            by_card.entry(&r.card_id).or_default().push(r);
        }
        let mut out = Vec::new();
        for (_, mut rs) in by_card {
            rs.sort_by_key(|r| (r.timestamp, r.txn_type, r.location.clone()));
            let mut open: Option<&AfcRecord> = None;
            for r in rs {
                if r.txn_type == TxnType::MetroEntry {
                    open = Some(r);
                } else if let Some(e) = open.take() {
                    let mins = (r.timestamp - e.timestamp).num_seconds() as f64 / 60.0;
                    if mins > 0.0 && mins <= max {
                        out.push(Trip {
                            card_id: e.card_id.clone(),
                            origin: e.location.clone(),
                            entry_time: e.timestamp,
                            dest: r.location.clone(),
                            exit_time: r.timestamp,
                        });
                    }
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn interleaved_cards_match_oracle() {
        let recs = vec![
            rec("c2", "2019-09-02 07:55:00", TxnType::MetroEntry, "D"),
            rec("c1", "2019-09-02 08:00:00", TxnType::MetroEntry, "A"),
            rec("c3", "2019-09-02 08:01:00", TxnType::MetroExit, "Q"),
            rec("c2", "2019-09-02 08:05:00", TxnType::Bus, "802"),
            rec("c1", "2019-09-02 08:20:00", TxnType::MetroExit, "B"),
            rec("c2", "2019-09-02 08:30:00", TxnType::MetroExit, "E"),
            rec("c3", "2019-09-02 09:00:00", TxnType::MetroEntry, "Q"),
            rec("c1", "2019-09-02 18:00:00", TxnType::MetroEntry, "B"),
            rec("c3", "2019-09-02 09:40:00", TxnType::MetroExit, "R"),
            rec("c1", "2019-09-02 18:25:00", TxnType::MetroExit, "A"),
        ];
        let (mut trips, _) = reconstruct_trips(&recs, ReconstructParams::default());
        trips.sort();
        assert_eq!(trips.len(), 4);
        assert_eq!(trips, group_then_scan(&recs, 240.0));
    }

    #[test]
    fn trips_file_round_trip() {
        let recs = vec![
            rec("c", "2019-09-02 08:00:00", TxnType::MetroEntry, "A"),
            rec("c", "2019-09-02 08:20:30", TxnType::MetroExit, "B"),
        ];
        let (trips, _) = reconstruct_trips(&recs, ReconstructParams::default());
        let mut buf = Vec::new();
        write_trips(&trips, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("20.50"));
        assert_eq!(read_trips(buf.as_slice()).unwrap(), trips);
    }

    fn arb_records() -> impl Strategy<Value = Vec<AfcRecord>> {
        let one = (0u8..4, 0u32..600, 0u8..4, 0u8..5).prop_map(|(card, minute, kind, loc)| {
            let txn = [TxnType::MetroEntry, TxnType::MetroExit, TxnType::MetroEntry, TxnType::Bus][kind as usize];
            AfcRecord {
                card_id: format!("card{card}"),
                timestamp: dt("2019-09-02 06:00:00") + chrono::Duration::minutes(minute as i64),
                txn_type: txn,
                operator: "op".into(),
                location: ["A", "B", "C", "D", "E"][loc as usize].into(),
            }
        });
        proptest::collection::vec(one, 0..40)
    }

    proptest! {
        #[test]
        fn reconstruction_is_permutation_invariant(recs in arb_records(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let params = ReconstructParams { max_trip_duration: 120.0 };
            let (mut a, mut an_a) = reconstruct_trips(&recs, params);
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (mut b, mut an_b) = reconstruct_trips(&shuffled, params);
            a.sort(); b.sort();
            let key = |x: &Anomaly| (x.card_id.clone(), x.timestamp, x.kind, x.station.clone());
            an_a.sort_by_key(key); an_b.sort_by_key(key);
            prop_assert_eq!(a, b);
            prop_assert_eq!(an_a, an_b);
        }

        #[test]
        fn every_metro_record_accounted_once(recs in arb_records()) {
            let (trips, anomalies) = reconstruct_trips(&recs, ReconstructParams { max_trip_duration: 120.0 });
            let metro = recs.iter().filter(|r| r.txn_type.is_metro()).count();
            let entries = recs.iter().filter(|r| r.txn_type == TxnType::MetroEntry).count();
            let consumed: usize = anomalies.iter().map(|a| a.kind.records_consumed()).sum();
            prop_assert_eq!(2 * trips.len() + consumed, metro);
            prop_assert!(trips.len() <= entries);
            prop_assert!(trips.iter().all(|t| t.entry_time < t.exit_time));
        }
    }
}
