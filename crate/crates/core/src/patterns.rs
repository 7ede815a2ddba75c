//! Regular-passenger screening and travel-pattern mining.
//!
//! A card is a regular when it travels on enough distinct days and repeats at
//! least one OD pair on enough distinct days. Patterns are found per OD pair by
//! one-dimensional gap cutting over entry times-of-day: sort, split wherever
//! consecutive entries are more than `eps_minutes` apart, keep clusters with at
//! least `min_pts` trips.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::afc::Trip;
use crate::clock;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenParams {
    pub day_threshold: usize,
    pub od_day_threshold: usize,
}

impl Default for ScreenParams {
    fn default() -> Self {
        ScreenParams { day_threshold: 20, od_day_threshold: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub eps_minutes: f64,
    pub min_pts: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams { eps_minutes: 45.0, min_pts: 5 }
    }
}

pub type OdPair = (String, String);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub card_id: String,
    pub travel_days: usize,
    /// Distinct travel days per OD pair.
    pub od_days: BTreeMap<OdPair, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TravelPattern {
    pub card_id: String,
    pub origin: String,
    pub dest: String,
    /// Mean entry time, minutes of day.
    pub entry_mean: f64,
    /// Population standard deviation of entry times, minutes.
    pub entry_std: f64,
    pub mean_duration: f64,
    pub trip_count: usize,
    pub day_count: usize,
}

impl TravelPattern {
    /// Stable textual key: `card|origin|dest|HH:MM:SS`.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.card_id,
            self.origin,
            self.dest,
            clock::format_minutes(self.entry_mean)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularPassenger {
    pub card_id: String,
    pub travel_day_count: usize,
    pub patterns: Vec<TravelPattern>,
}

/// Population standard deviation; zero for fewer than two values.
pub fn population_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Screens cards by travel-day count and spatial consistency. Same-station
/// trips count toward travel days but not toward any OD pair. Output is sorted
/// by card id.
pub fn screen_regulars(trips: &[Trip], params: ScreenParams) -> Vec<Candidate> {
    let mut days: BTreeMap<&str, BTreeSet<NaiveDate>> = BTreeMap::new();
    let mut od_days: BTreeMap<&str, BTreeMap<OdPair, BTreeSet<NaiveDate>>> = BTreeMap::new();
    for t in trips {
        days.entry(&t.card_id).or_default().insert(t.date());
        if !t.is_same_station() {
            od_days
                .entry(&t.card_id)
                .or_default()
                .entry((t.origin.clone(), t.dest.clone()))
                .or_default()
                .insert(t.date());
        }
    }

    days.into_iter()
        .filter_map(|(card, d)| {
            let od: BTreeMap<OdPair, usize> = od_days
                .remove(card)
                .unwrap_or_default()
                .into_iter()
                .map(|(k, v)| (k, v.len()))
                .collect();
            let consistent = od.values().any(|&n| n >= params.od_day_threshold);
            (d.len() >= params.day_threshold && consistent).then(|| Candidate {
                card_id: card.to_string(),
                travel_days: d.len(),
                od_days: od,
            })
        })
        .collect()
}

/// Splits sorted values wherever the gap exceeds `eps`. Returns index ranges
/// into the sorted slice.
pub fn gap_cut(sorted: &[f64], eps: f64) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    if sorted.is_empty() {
        return out;
    }
    let mut start = 0;
    for i in 1..sorted.len() {
        if sorted[i] - sorted[i - 1] > eps {
            out.push(start..i);
            start = i;
        }
    }
    out.push(start..sorted.len());
    out
}

/// Mines patterns from one card's trips. Same-station trips are ignored.
/// Patterns come out ordered by (origin, dest, entry_mean).
pub fn mine_patterns(card_trips: &[&Trip], params: ClusterParams) -> Vec<TravelPattern> {
    let mut by_od: BTreeMap<(&str, &str), Vec<&Trip>> = BTreeMap::new();
    for t in card_trips.iter().filter(|t| !t.is_same_station()) {
        by_od.entry((&t.origin, &t.dest)).or_default().push(t);
    }

    let mut out = Vec::new();
    for ((origin, dest), mut group) in by_od {
        group.sort_by(|a, b| {
            clock::datetime_minutes(a.entry_time)
                .total_cmp(&clock::datetime_minutes(b.entry_time))
                .then(a.entry_time.cmp(&b.entry_time))
        });
        let times: Vec<f64> = group.iter().map(|t| clock::datetime_minutes(t.entry_time)).collect();
        for range in gap_cut(&times, params.eps_minutes) {
            if range.len() < params.min_pts.max(1) {
                continue;
            }
            let members = &group[range.clone()];
            let entry_times = &times[range];
            let durations: Vec<f64> = members.iter().map(|t| t.duration_minutes()).collect();
            let days: BTreeSet<NaiveDate> = members.iter().map(|t| t.date()).collect();
            out.push(TravelPattern {
                card_id: members[0].card_id.clone(),
                origin: origin.to_string(),
                dest: dest.to_string(),
                entry_mean: mean(entry_times),
                entry_std: population_std(entry_times),
                mean_duration: mean(&durations),
                trip_count: members.len(),
                day_count: days.len(),
            });
        }
    }
    out
}

/// Screening followed by per-card mining. Cards that pass screening but
/// yield no cluster are dropped.
pub fn mine_regulars(trips: &[Trip], screen: ScreenParams, cluster: ClusterParams) -> Vec<RegularPassenger> {
    let candidates = screen_regulars(trips, screen);
    let wanted: BTreeSet<&str> = candidates.iter().map(|c| c.card_id.as_str()).collect();
    let mut by_card: BTreeMap<&str, Vec<&Trip>> = BTreeMap::new();
    for t in trips.iter().filter(|t| wanted.contains(t.card_id.as_str())) {
        by_card.entry(&t.card_id).or_default().push(t);
    }
    candidates
        .into_iter()
        .filter_map(|c| {
            let patterns = mine_patterns(by_card.get(c.card_id.as_str()).map_or(&[][..], |v| v), cluster);
            if patterns.is_empty() {
                log::debug!("card {} passed screening but has no pattern", c.card_id);
                return None;
            }
            Some(RegularPassenger { card_id: c.card_id, travel_day_count: c.travel_days, patterns })
        })
        .collect()
}

const PATTERN_HEADER: [&str; 8] = [
    "card_id",
    "origin",
    "dest",
    "entry_mean",
    "entry_std",
    "mean_duration",
    "trip_count",
    "day_count",
];

/// Writes patterns with full float precision so downstream stages see the
/// exact mined values.
pub fn write_patterns<W: Write>(patterns: &[TravelPattern], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| std::io::Error::other(e.to_string());
    w.write_record(PATTERN_HEADER).map_err(io)?;
    for p in patterns {
        w.write_record([
            p.card_id.clone(),
            p.origin.clone(),
            p.dest.clone(),
            p.entry_mean.to_string(),
            p.entry_std.to_string(),
            p.mean_duration.to_string(),
            p.trip_count.to_string(),
            p.day_count.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()
}

pub fn read_patterns<R: Read>(source: R) -> std::io::Result<Vec<TravelPattern>> {
    let mut rdr = csv::Reader::from_reader(source);
    let bad = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| row.get(i).unwrap_or("").to_string();
        let num = |i: usize| f(i).parse::<f64>().map_err(|_| bad(format!("bad number in column {i}")));
        let int = |i: usize| f(i).parse::<usize>().map_err(|_| bad(format!("bad count in column {i}")));
        out.push(TravelPattern {
            card_id: f(0),
            origin: f(1),
            dest: f(2),
            entry_mean: num(3)?,
            entry_std: num(4)?,
            mean_duration: num(5)?,
            trip_count: int(6)?,
            day_count: int(7)?,
        });
    }
    Ok(out)
}
