//! Wait/Abandon labelling of affected instances and the five-feature choice
//! record `(v1, v2, p1, p2, p3)`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afc::{AfcRecord, Trip};
use crate::clock;
use crate::delay::{DelayEvent, DelayType};
use crate::impact::AffectedInstance;
use crate::patterns::TravelPattern;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChoiceLabel {
    Wait,
    /// The positive class.
    Abandon,
}

impl ChoiceLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ChoiceLabel::Wait => "Wait",
            ChoiceLabel::Abandon => "Abandon",
        }
    }

    pub fn is_positive(self) -> bool {
        self == ChoiceLabel::Abandon
    }
}

impl fmt::Display for ChoiceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChoiceLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wait" => Ok(ChoiceLabel::Wait),
            "abandon" => Ok(ChoiceLabel::Abandon),
            _ => Err(format!("unknown choice label {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DelayPeriod {
    MorningPeak,
    EveningPeak,
    OffPeak,
}

impl DelayPeriod {
    pub const ALL: [DelayPeriod; 3] = [DelayPeriod::MorningPeak, DelayPeriod::EveningPeak, DelayPeriod::OffPeak];

    pub fn as_str(self) -> &'static str {
        match self {
            DelayPeriod::MorningPeak => "MorningPeak",
            DelayPeriod::EveningPeak => "EveningPeak",
            DelayPeriod::OffPeak => "OffPeak",
        }
    }
}

impl fmt::Display for DelayPeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DelayPeriod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DelayPeriod::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown delay period {s:?}"))
    }
}

/// Half-open peak windows `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeakWindows {
    #[serde(with = "clock::serde_hhmm")]
    pub morning_start: NaiveTime,
    #[serde(with = "clock::serde_hhmm")]
    pub morning_end: NaiveTime,
    #[serde(with = "clock::serde_hhmm")]
    pub evening_start: NaiveTime,
    #[serde(with = "clock::serde_hhmm")]
    pub evening_end: NaiveTime,
}

impl Default for PeakWindows {
    fn default() -> Self {
        let t = |h, m| NaiveTime::from_hms_opt(h, m, 0).unwrap();
        PeakWindows { morning_start: t(7, 0), morning_end: t(9, 30), evening_start: t(17, 0), evening_end: t(19, 30) }
    }
}

impl PeakWindows {
    pub fn bucket(&self, t: NaiveTime) -> DelayPeriod {
        if t >= self.morning_start && t < self.morning_end {
            DelayPeriod::MorningPeak
        } else if t >= self.evening_start && t < self.evening_end {
            DelayPeriod::EveningPeak
        } else {
            DelayPeriod::OffPeak
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelParams {
    pub slack_minutes: f64,
}

impl Default for LabelParams {
    fn default() -> Self {
        LabelParams { slack_minutes: 60.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelOutcome {
    pub label: ChoiceLabel,
    /// A bus tap fell inside `[start, end + slack]`.
    pub bus_corroborated: bool,
    /// Both a qualifying metro trip and a same-station exit were seen.
    pub conflict: bool,
}

/// Labels one affected (pattern, event) pair from the card's delay-day
/// behavior. `trips` and `records` may hold other cards and days; only the
/// pattern's card on the event date is considered.
pub fn label_choice(
    trips: &[Trip],
    records: &[AfcRecord],
    pattern: &TravelPattern,
    event: &DelayEvent,
    params: LabelParams,
) -> LabelOutcome {
    let (start, end) = (event.start_minutes(), event.end_minutes());
    let lo = pattern.entry_mean - 3.0 * urgency(pattern) - params.slack_minutes;
    let hi = end + params.slack_minutes;
    let todays = trips.iter().filter(|t| t.card_id == pattern.card_id && t.date() == event.date);

    let mut latest_wait_entry: Option<f64> = None;
    let mut latest_abort_exit: Option<f64> = None;
    for t in todays {
        let entry = clock::datetime_minutes(t.entry_time);
        if !t.is_same_station() && t.origin == pattern.origin && t.dest == pattern.dest && entry >= lo && entry <= hi {
            latest_wait_entry = Some(latest_wait_entry.map_or(entry, |e| e.max(entry)));
        }
        let exit = clock::datetime_minutes(t.exit_time);
        if t.is_same_station() && t.origin == pattern.origin && exit >= start && exit <= end {
            latest_abort_exit = Some(latest_abort_exit.map_or(exit, |e| e.max(exit)));
        }
    }

    let bus_corroborated = records.iter().any(|r| {
        r.card_id == pattern.card_id
            && r.txn_type.is_bus()
            && r.timestamp.date() == event.date
            && (start..=hi).contains(&clock::datetime_minutes(r.timestamp))
    });

    let (label, conflict) = match (latest_wait_entry, latest_abort_exit) {
        (Some(_), None) => (ChoiceLabel::Wait, false),
        (None, _) => (ChoiceLabel::Abandon, false),
        (Some(w), Some(a)) => {
            let label = if w > a { ChoiceLabel::Wait } else { ChoiceLabel::Abandon };
            log::info!("card {} event {}: conflicting evidence, labelled {label}", pattern.card_id, event.event_id);
            (label, true)
        }
    };
    LabelOutcome { label, bus_corroborated, conflict }
}

/// Urgency `p3`: population std of the pattern's entry times, in minutes.
pub fn urgency(pattern: &TravelPattern) -> f64 {
    pattern.entry_std
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub card_id: String,
    pub event_id: u32,
    /// Delay type.
    pub v1: DelayType,
    /// Delay period.
    pub v2: DelayPeriod,
    /// Mean trip duration of the affected pattern, minutes.
    pub p1: f64,
    /// Started the trip before the delay.
    pub p2: bool,
    /// Urgency, minutes; smaller is more urgent.
    pub p3: f64,
    pub label: Option<ChoiceLabel>,
}

pub type RecordKey = (String, u32);

impl ChoiceRecord {
    pub fn key(&self) -> RecordKey {
        (self.card_id.clone(), self.event_id)
    }

    pub fn unlabeled(&self) -> ChoiceRecord {
        ChoiceRecord { label: None, ..self.clone() }
    }
}

pub const FEATURE_NAMES: [&str; 5] = ["v1", "v2", "p1", "p2", "p3"];

/// Builds the feature vector. Delay-day behavior enters only via `started`.
pub fn featurize(
    instance: &AffectedInstance,
    pattern: &TravelPattern,
    event: &DelayEvent,
    started: bool,
    peaks: &PeakWindows,
) -> ChoiceRecord {
    ChoiceRecord {
        card_id: instance.card_id.clone(),
        event_id: instance.event_id,
        v1: event.delay_type,
        v2: peaks.bucket(event.start),
        p1: pattern.mean_duration,
        p2: started,
        p3: urgency(pattern),
        label: None,
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DATASET_HEADER: [&str; 8] = ["card_id", "event_id", "v1", "v2", "p1", "p2", "p3", "label"];

pub fn write_dataset<W: Write>(records: &[ChoiceRecord], out: W) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DATASET_HEADER)?;
    for r in records {
        w.write_record([
            r.card_id.clone(),
            r.event_id.to_string(),
            r.v1.as_str().to_string(),
            r.v2.as_str().to_string(),
            format!("{:?}", r.p1),
            r.p2.to_string(),
            format!("{:?}", r.p3),
            r.label.map(|l| l.as_str().to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(source: R) -> Result<Vec<ChoiceRecord>, DatasetError> {
    let mut rdr = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let err = |msg: String| DatasetError::Row { row: line, msg };
        let cell = |c: usize| row.get(c).ok_or_else(|| err(format!("missing column {}", DATASET_HEADER[c])));
        let num = |c: usize| -> Result<f64, DatasetError> {
            let s = cell(c)?;
            s.trim().parse::<f64>().map_err(|_| err(format!("bad {} {s:?}", DATASET_HEADER[c])))
        };
        let label = match cell(7)?.trim() {
            "" => None,
            s => Some(s.parse().map_err(err)?),
        };
        out.push(ChoiceRecord {
            card_id: cell(0)?.to_string(),
            event_id: cell(1)?.trim().parse().map_err(|_| err("bad event_id".into()))?,
            v1: cell(2)?.parse().map_err(err)?,
            v2: cell(3)?.parse().map_err(err)?,
            p1: num(4)?,
            p2: cell(5)?.trim().parse().map_err(|_| err("bad p2".into()))?,
            p3: num(6)?,
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afc::TxnType;
    use crate::network::Direction;
    use crate::patterns::population_std;
    use chrono::{NaiveDate, NaiveDateTime};

    fn event() -> DelayEvent {
        DelayEvent {
            event_id: 12,
            line: "Line 5".into(),
            delay_type: DelayType::Others,
            date: NaiveDate::from_ymd_opt(2019, 8, 20).unwrap(),
            start: NaiveTime::from_hms_opt(7, 50, 0).unwrap(),
            end: NaiveTime::from_hms_opt(8, 36, 0).unwrap(),
            from_station: "Minzhi".into(),
            to_station: "Qianwan Park".into(),
            direction: Direction::Down,
        }
    }

    fn pattern() -> TravelPattern {
        TravelPattern {
            card_id: "c".into(),
            origin: "Minzhi".into(),
            dest: "Qianwan Park".into(),
            entry_mean: 480.0,
            entry_std: 8.2,
            mean_duration: 35.0,
            trip_count: 20,
            day_count: 20,
        }
    }

    fn dt(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M").unwrap()
    }

    fn trip(o: &str, entry: &str, d: &str, exit: &str) -> Trip {
        Trip { card_id: "c".into(), origin: o.into(), entry_time: dt(entry), dest: d.into(), exit_time: dt(exit) }
    }

    fn bus(t: &str) -> AfcRecord {
        AfcRecord { card_id: "c".into(), timestamp: dt(t), txn_type: TxnType::Bus, operator: "Bus".into(), location: "B1".into() }
    }

    #[test]
    fn late_trip_is_wait() {
        let t = [trip("Minzhi", "2019-08-20 08:40", "Qianwan Park", "2019-08-20 09:15")];
        let out = label_choice(&t, &[], &pattern(), &event(), LabelParams::default());
        assert_eq!(out.label, ChoiceLabel::Wait);
        assert!(!out.conflict);
    }

    #[test]
    fn no_trip_with_bus_is_corroborated_abandon() {
        let out = label_choice(&[], &[bus("2019-08-20 08:20")], &pattern(), &event(), LabelParams::default());
        assert_eq!(out, LabelOutcome { label: ChoiceLabel::Abandon, bus_corroborated: true, conflict: false });
    }

    #[test]
    fn other_day_or_other_od_is_abandon() {
        let t = [
            trip("Minzhi", "2019-08-21 08:00", "Qianwan Park", "2019-08-21 08:35"),
            trip("Minzhi", "2019-08-20 08:00", "Tanglang", "2019-08-20 08:10"),
            trip("Minzhi", "2019-08-20 11:00", "Qianwan Park", "2019-08-20 11:35"),
        ];
        assert_eq!(label_choice(&t, &[], &pattern(), &event(), LabelParams::default()).label, ChoiceLabel::Abandon);
    }

    #[test]
    fn mid_trip_abandonment_and_conflict() {
        let aborted = trip("Minzhi", "2019-08-20 07:45", "Minzhi", "2019-08-20 07:58");
        let out = label_choice(std::slice::from_ref(&aborted), &[], &pattern(), &event(), LabelParams::default());
        assert_eq!(out.label, ChoiceLabel::Abandon);

        let retry = trip("Minzhi", "2019-08-20 08:30", "Qianwan Park", "2019-08-20 09:10");
        let out = label_choice(&[aborted.clone(), retry], &[], &pattern(), &event(), LabelParams::default());
        assert_eq!((out.label, out.conflict), (ChoiceLabel::Wait, true));

        let earlier = trip("Minzhi", "2019-08-20 07:20", "Qianwan Park", "2019-08-20 07:55");
        let out = label_choice(&[earlier, aborted], &[], &pattern(), &event(), LabelParams::default());
        assert_eq!((out.label, out.conflict), (ChoiceLabel::Abandon, true));
    }

    #[test]
    fn urgency_values() {
        assert_eq!(population_std(&[480.0, 480.0, 480.0]), 0.0);
        assert!((population_std(&[470.0, 480.0, 490.0]) - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((population_std(&[470.0, 480.0, 490.0]) - 8.165).abs() < 1e-3);
        assert_eq!(population_std(&[500.0]), 0.0);
        assert_eq!(urgency(&pattern()), 8.2);
    }

    #[test]
    fn featurize_maps_fields() {
        let inst = AffectedInstance {
            card_id: "c".into(),
            pattern_key: pattern().key(),
            origin: "Minzhi".into(),
            dest: "Qianwan Park".into(),
            event_id: 12,
            overlap_stations: vec!["Minzhi".into(), "Tanglang".into()],
            expected_segment_entry: 480.0,
            window_start: 470.0,
            window_end: 516.0,
        };
        let r = featurize(&inst, &pattern(), &event(), false, &PeakWindows::default());
        assert_eq!((r.v1, r.v2, r.p1, r.p2, r.p3), (DelayType::Others, DelayPeriod::MorningPeak, 35.0, false, 8.2));
        assert_eq!(r.label, None);
        assert_eq!(FEATURE_NAMES.len(), 5);
    }

    #[test]
    fn bucket_boundaries() {
        let w = PeakWindows::default();
        let t = |h, m| NaiveTime::from_hms_opt(h, m, 0).unwrap();
        assert_eq!(w.bucket(t(12, 0)), DelayPeriod::OffPeak);
        assert_eq!(w.bucket(t(7, 0)), DelayPeriod::MorningPeak);
        assert_eq!(w.bucket(t(9, 30)), DelayPeriod::OffPeak);
        assert_eq!(w.bucket(t(17, 0)), DelayPeriod::EveningPeak);
        assert_eq!(w.bucket(t(19, 29)), DelayPeriod::EveningPeak);
    }

    #[test]
    fn dataset_round_trip() {
        let a = ChoiceRecord {
            card_id: "c1".into(),
            event_id: 3,
            v1: DelayType::SignalingFault,
            v2: DelayPeriod::OffPeak,
            p1: 35.25,
            p2: true,
            p3: 1.0 / 3.0,
            label: Some(ChoiceLabel::Abandon),
        };
        let b = ChoiceRecord { card_id: "c2".into(), label: None, ..a.clone() };
        let mut buf = Vec::new();
        write_dataset(&[a.clone(), b.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("card_id,event_id,v1,v2,p1,p2,p3,label\n"));
        assert!(text.contains("Signaling Fault,OffPeak,35.25,true"));
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), vec![a, b]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bucket_is_total(m in 0u32..1440) {
                let t = NaiveTime::from_hms_opt(m / 60, m % 60, 0).unwrap();
                let w = PeakWindows::default();
                let hits = DelayPeriod::ALL.iter().filter(|&&p| w.bucket(t) == p).count();
                prop_assert_eq!(hits, 1);
            }

            #[test]
            fn label_is_order_free(entries in proptest::collection::vec((400u32..700, 0u8..3), 0..6), seed in any::<u64>()) {
                let mut trips: Vec<Trip> = entries.iter().map(|&(m, kind)| {
                    let at = |x: u32| NaiveDate::from_ymd_opt(2019, 8, 20).unwrap().and_hms_opt(x / 60, x % 60, 0).unwrap();
                    let dest = match kind { 0 => "Qianwan Park", 1 => "Minzhi", _ => "Tanglang" };
                    Trip { card_id: "c".into(), origin: "Minzhi".into(), entry_time: at(m), dest: dest.into(), exit_time: at(m + 20) }
                }).collect();
                let a = label_choice(&trips, &[], &pattern(), &event(), LabelParams::default());
                let n = trips.len();
                if n > 1 {
                    trips.rotate_left((seed as usize) % n);
                    trips.swap(0, n - 1);
                }
                let b = label_choice(&trips, &[], &pattern(), &event(), LabelParams::default());
                prop_assert_eq!(a, b);
            }
        }
    }
}
