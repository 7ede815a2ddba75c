//! Affected-passenger identification by spatiotemporal overlap.
//!
//! Spatial: the pattern's inferred route must ride at least two consecutive
//! stations of the delayed interval, on the delayed line, in the delayed
//! direction. Temporal: the pattern's expected entry window
//! `[mean - std - pad, mean + std + pad]`, shifted by the route offset of the
//! first overlapped station, must intersect the delay window.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::afc::{AfcRecord, TxnType};
use crate::clock;
use crate::delay::DelayEvent;
use crate::network::{Network, NetworkError, Route, StationId};
use crate::patterns::TravelPattern;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpactParams {
    pub window_pad_minutes: f64,
    /// Count a route that touches a single interval station as affected.
    pub endpoint_contact_counts: bool,
}

impl Default for ImpactParams {
    fn default() -> Self {
        ImpactParams { window_pad_minutes: 10.0, endpoint_contact_counts: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffectedInstance {
    pub card_id: String,
    pub pattern_key: String,
    pub origin: String,
    pub dest: String,
    pub event_id: u32,
    pub overlap_stations: Vec<String>,
    /// Expected arrival at the first overlapped station, minutes of day.
    pub expected_segment_entry: f64,
    pub window_start: f64,
    pub window_end: f64,
}

/// Stations of the first run of the route lying inside the event interval on
/// the event's line and direction. Runs shorter than two stations only count
/// when `endpoint_contact_counts` is set.
pub fn spatial_overlap(
    route: &Route,
    event: &DelayEvent,
    network: &Network,
    endpoint_contact_counts: bool,
) -> Option<Vec<StationId>> {
    let line = network.line(&event.line)?;
    let (lo, hi) = event.interval_positions(network)?;
    let min_run = if endpoint_contact_counts { 1 } else { 2 };
    for leg in route.legs.iter().filter(|l| l.line == event.line && l.direction == event.direction) {
        let mut run: Vec<StationId> = Vec::new();
        for &s in &leg.stations {
            let inside = line.position(s).is_some_and(|p| p >= lo && p <= hi);
            if inside {
                run.push(s);
            } else if run.len() >= min_run {
                return Some(run);
            } else {
                run.clear();
            }
        }
        if run.len() >= min_run {
            return Some(run);
        }
    }
    None
}

/// Overlap test against a precomputed route for the pattern's OD pair.
pub fn is_affected_on_route(
    pattern: &TravelPattern,
    route: &Route,
    event: &DelayEvent,
    network: &Network,
    params: ImpactParams,
) -> Option<AffectedInstance> {
    let overlap = spatial_overlap(route, event, network, params.endpoint_contact_counts)?;
    let offset = route.offset_of(overlap[0]).expect("overlap lies on route");
    let spread = pattern.entry_std + params.window_pad_minutes;
    let expected = (pattern.entry_mean - spread + offset, pattern.entry_mean + spread + offset);
    let window = (event.start_minutes(), event.end_minutes());
    if !clock::intervals_intersect(expected, window) {
        return None;
    }
    Some(AffectedInstance {
        card_id: pattern.card_id.clone(),
        pattern_key: pattern.key(),
        origin: pattern.origin.clone(),
        dest: pattern.dest.clone(),
        event_id: event.event_id,
        overlap_stations: overlap.iter().map(|&s| network.station_name(s).to_string()).collect(),
        expected_segment_entry: pattern.entry_mean + offset,
        window_start: window.0,
        window_end: window.1,
    })
}

pub fn is_affected(
    pattern: &TravelPattern,
    event: &DelayEvent,
    network: &Network,
    params: ImpactParams,
) -> Option<AffectedInstance> {
    match network.shortest_route_by_name(&pattern.origin, &pattern.dest) {
        Ok(route) => is_affected_on_route(pattern, &route, event, network, params),
        Err(e) => {
            log::warn!("pattern {} has no usable route: {e}", pattern.key());
            None
        }
    }
}

/// Memoized OD routing.
#[derive(Default)]
pub struct RouteCache {
    routes: HashMap<(String, String), Result<Route, NetworkError>>,
}

impl RouteCache {
    pub fn route(&mut self, network: &Network, origin: &str, dest: &str) -> &Result<Route, NetworkError> {
        self.routes
            .entry((origin.to_string(), dest.to_string()))
            .or_insert_with(|| network.shortest_route_by_name(origin, dest))
    }
}

/// Every affected (pattern, event) pair, ordered by (event_id, card_id).
/// When one card has several affected patterns for the same event, the one
/// reaching the delayed section earliest is kept.
pub fn identify_affected(
    patterns: &[TravelPattern],
    events: &[DelayEvent],
    network: &Network,
    params: ImpactParams,
) -> Vec<AffectedInstance> {
    let mut cache = RouteCache::default();
    let mut best: BTreeMap<(u32, String), AffectedInstance> = BTreeMap::new();
    for p in patterns {
        let route = match cache.route(network, &p.origin, &p.dest) {
            Ok(r) => r.clone(),
            Err(e) => {
                log::warn!("pattern {} skipped: {e}", p.key());
                continue;
            }
        };
        for ev in events {
            let Some(inst) = is_affected_on_route(p, &route, ev, network, params) else {
                continue;
            };
            let key = (ev.event_id, p.card_id.clone());
            match best.get(&key) {
                Some(prev) if prev.expected_segment_entry <= inst.expected_segment_entry => {
                    log::info!("card {} has several patterns hit by event {}; keeping {}", p.card_id, ev.event_id, prev.pattern_key);
                }
                _ => {
                    best.insert(key, inst);
                }
            }
        }
    }
    best.into_values().collect()
}

/// True iff the card tapped in at the pattern's origin on the event date no
/// later than the delay start and no earlier than
/// `entry_mean - 3 * max(entry_std, 15)`.
pub fn started_before_delay(records: &[AfcRecord], pattern: &TravelPattern, event: &DelayEvent) -> bool {
    let earliest = pattern.entry_mean - 3.0 * pattern.entry_std.max(15.0);
    let start = event.start_minutes();
    records.iter().any(|r| {
        r.txn_type == TxnType::MetroEntry
            && r.card_id == pattern.card_id
            && r.timestamp.date() == event.date
            && r.location == pattern.origin
            && {
                let t = clock::datetime_minutes(r.timestamp);
                t <= start && t >= earliest
            }
    })
}
