//! Synthetic worlds with planted ground truth: a network, an AFC stream,
//! a delay table with narratives, and the regulars, patterns, affected
//! instances and choice labels the pipeline should recover.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime, Weekday};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afc::{write_afc, AfcRecord, Calendar, DayKind, Trip, TxnType};
use crate::choice::{label_choice, ChoiceLabel, ChoiceRecord, DelayPeriod, LabelParams, PeakWindows};
use crate::delay::{write_delay_table, write_jsonl, DelayEvent, DelayType};
use crate::impact::{identify_affected, AffectedInstance, ImpactParams};
use crate::network::{Direction, LineDef, Network, NetworkConfig, NetworkError, NetworkParams, Route};
use crate::patterns::{mine_patterns, screen_regulars, write_patterns, ClusterParams, ScreenParams, TravelPattern};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("network: {0}")]
    Network(#[from] NetworkError),
    #[error("event {id} is infeasible: {why}")]
    InfeasibleEvent { id: u32, why: String },
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("generated world is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Weights of the planted choice rule. Each instance scores
/// `w_not_started*[!p2] + w_morning*[MorningPeak] + w_urgent*[p3 < urgent_p3]
/// + w_long*[p1 > long_p1] + U(0, score_noise)`; the highest
/// `round(abandon_rate * n)` scores abandon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorParams {
    pub abandon_rate: f64,
    /// Share of Wait instances whose trip is moved outside the labelling window.
    pub noise_rate: f64,
    pub bus_tap_prob: f64,
    pub w_not_started: f64,
    pub w_morning: f64,
    pub w_urgent: f64,
    pub urgent_p3: f64,
    pub w_long: f64,
    pub long_p1: f64,
    pub score_noise: f64,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        BehaviorParams {
            abandon_rate: 0.19,
            noise_rate: 0.0,
            bus_tap_prob: 0.6,
            w_not_started: 2.0,
            w_morning: 1.5,
            w_urgent: 1.5,
            urgent_p3: 6.0,
            w_long: 0.5,
            long_p1: 60.0,
            score_noise: 1.0,
        }
    }
}

impl BehaviorParams {
    pub fn score(&self, v2: DelayPeriod, p1: f64, p2: bool, p3: f64, u: f64) -> f64 {
        let ind = |b: bool| if b { 1.0 } else { 0.0 };
        self.w_not_started * ind(!p2)
            + self.w_morning * ind(v2 == DelayPeriod::MorningPeak)
            + self.w_urgent * ind(p3 < self.urgent_p3)
            + self.w_long * ind(p1 > self.long_p1)
            + self.score_noise * u
    }
}

/// Ranges for planted regular patterns, minutes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternSpec {
    pub morning_center: (f64, f64),
    pub evening_center: (f64, f64),
    /// Half-width of the uniform daily entry jitter, drawn per passenger.
    pub jitter: (f64, f64),
    /// Extra minutes added to the route time, uniform in `[0, duration_jitter]`.
    pub duration_jitter: f64,
}

impl Default for PatternSpec {
    fn default() -> Self {
        PatternSpec { morning_center: (420.0, 540.0), evening_center: (1020.0, 1140.0), jitter: (1.0, 12.0), duration_jitter: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub start_date: NaiveDate,
    pub weekdays: usize,
    pub excluded_dates: Vec<NaiveDate>,
    pub regulars: usize,
    /// Travel often but never repeat an OD pair often enough.
    pub casual_high: usize,
    /// Travel too rarely.
    pub casual_low: usize,
    pub pattern: PatternSpec,
    pub events: Vec<DelayEvent>,
    pub random_events: usize,
    pub behavior: BehaviorParams,
    pub screen: ScreenParams,
    pub cluster: ClusterParams,
    pub impact: ImpactParams,
    pub label: LabelParams,
    pub peaks: PeakWindows,
}

pub fn toy_network() -> NetworkConfig {
    let l1 = ["A01", "A02", "A03", "A04", "A05", "T12", "A07", "A08", "A09", "A10", "T13", "A12"];
    let l2 = ["B01", "B02", "B03", "T12", "B05", "B06", "B07", "T23", "B09", "B10"];
    let l3 = ["C01", "C02", "T13", "C04", "C05", "T23", "C07", "C08", "C09", "C10"];
    NetworkConfig {
        params: NetworkParams::default(),
        lines: vec![LineDef::new("Line 1", &l1), LineDef::new("Line 2", &l2), LineDef::new("Line 3", &l3)],
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            network: toy_network(),
            start_date: NaiveDate::from_ymd_opt(2019, 8, 1).unwrap(),
            weekdays: 41,
            excluded_dates: Vec::new(),
            regulars: 600,
            casual_high: 200,
            casual_low: 200,
            pattern: PatternSpec::default(),
            events: Vec::new(),
            random_events: 6,
            behavior: BehaviorParams::default(),
            screen: ScreenParams::default(),
            cluster: ClusterParams::default(),
            impact: ImpactParams::default(),
            label: LabelParams::default(),
            peaks: PeakWindows::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthLabel {
    pub card_id: String,
    pub event_id: u32,
    pub label: ChoiceLabel,
    pub started: bool,
    pub bus_tap: bool,
    /// The emitted trip was deliberately moved outside the labelling window.
    pub noisy: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub regulars: Vec<String>,
    /// One entry per planted regular: the pattern centers it was built from.
    pub planted_centers: BTreeMap<String, Vec<f64>>,
    pub patterns: Vec<TravelPattern>,
    pub affected: Vec<AffectedInstance>,
    pub labels: Vec<TruthLabel>,
}

pub struct World {
    pub network_config: NetworkConfig,
    pub network: Network,
    pub calendar: Calendar,
    pub weekdays: Vec<NaiveDate>,
    pub records: Vec<AfcRecord>,
    pub events: Vec<DelayEvent>,
    pub narratives: Vec<String>,
    pub truth: GroundTruth,
}

fn weekday_list(start: NaiveDate, n: usize, excluded: &[NaiveDate]) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) && !excluded.contains(&d) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

fn at(date: NaiveDate, secs: i64) -> NaiveDateTime {
    date.and_time(NaiveTime::MIN) + Duration::seconds(secs.clamp(0, 86_399))
}

fn minutes_to_secs(m: f64) -> i64 {
    (m * 60.0).round() as i64
}

fn random_event(net: &Network, id: u32, date: NaiveDate, rng: &mut ChaCha8Rng) -> DelayEvent {
    let line = net.lines().choose(rng).expect("network has lines");
    let n = line.stations.len();
    let len = rng.gen_range(3..=7usize).min(n);
    let lo = rng.gen_range(0..=n - len);
    let hi = lo + len - 1;
    let direction = if rng.gen_bool(0.5) { Direction::Up } else { Direction::Down };
    let (from, to) = match direction {
        Direction::Up => (line.stations[lo], line.stations[hi]),
        Direction::Down => (line.stations[hi], line.stations[lo]),
    };
    let start_min = if rng.gen_bool(0.85) { rng.gen_range(435..=525) } else { rng.gen_range(1035..=1125) };
    let dur = rng.gen_range(25..=80);
    let t = |m: u32| NaiveTime::from_hms_opt(m / 60, m % 60, 0).unwrap();
    DelayEvent {
        event_id: id,
        line: line.id.clone(),
        delay_type: *DelayType::ALL.choose(rng).unwrap(),
        date,
        start: t(start_min),
        end: t(start_min + dur),
        from_station: net.station_name(from).to_string(),
        to_station: net.station_name(to).to_string(),
        direction,
    }
}

struct RouteTable<'a> {
    net: &'a Network,
    cache: HashMap<(String, String), Route>,
}

impl RouteTable<'_> {
    fn get(&mut self, o: &str, d: &str) -> Result<&Route, NetworkError> {
        let key = (o.to_string(), d.to_string());
        if !self.cache.contains_key(&key) {
            let r = self.net.shortest_route_by_name(o, d)?;
            self.cache.insert(key.clone(), r);
        }
        Ok(&self.cache[&key])
    }
}

fn operator(r: &Route, first: bool) -> String {
    let leg = if first { r.legs.first() } else { r.legs.last() };
    leg.map(|l| l.line.clone()).unwrap_or_default()
}

/// A trip to emit, with the lines used for the entry and exit records.
#[derive(Clone)]
struct Planned {
    trip: Trip,
    entry_line: String,
    exit_line: String,
}

fn metro_records(p: &Planned) -> [AfcRecord; 2] {
    [
        AfcRecord {
            card_id: p.trip.card_id.clone(),
            timestamp: p.trip.entry_time,
            txn_type: TxnType::MetroEntry,
            operator: p.entry_line.clone(),
            location: p.trip.origin.clone(),
        },
        AfcRecord {
            card_id: p.trip.card_id.clone(),
            timestamp: p.trip.exit_time,
            txn_type: TxnType::MetroExit,
            operator: p.exit_line.clone(),
            location: p.trip.dest.clone(),
        },
    ]
}

fn bus_record(card: &str, ts: NaiveDateTime, rng: &mut ChaCha8Rng) -> AfcRecord {
    let (kind, op) = if rng.gen_bool(0.5) { (TxnType::Bus, "Bus Group") } else { (TxnType::BusQr, "Eastern Bus") };
    AfcRecord {
        card_id: card.to_string(),
        timestamp: ts,
        txn_type: kind,
        operator: op.into(),
        location: format!("M{}", rng.gen_range(100..500)),
    }
}

struct RegularPlan {
    card: String,
    home: String,
    work: String,
    centers: [f64; 2],
    jitter: f64,
}

impl RegularPlan {
    fn ods(&self) -> [(&str, &str); 2] {
        [(&self.home, &self.work), (&self.work, &self.home)]
    }
}

fn plan_trip(
    routes: &mut RouteTable,
    card: &str,
    o: &str,
    d: &str,
    date: NaiveDate,
    entry_secs: i64,
    extra_minutes: f64,
) -> Result<Planned, NetworkError> {
    let r = routes.get(o, d)?;
    let dur = minutes_to_secs(r.total_time() + extra_minutes).max(60);
    let entry_line = operator(r, true);
    let exit_line = operator(r, false);
    Ok(Planned {
        trip: Trip { card_id: card.into(), origin: o.into(), entry_time: at(date, entry_secs), dest: d.into(), exit_time: at(date, entry_secs + dur) },
        entry_line,
        exit_line,
    })
}

pub fn generate_world(config: &WorldConfig) -> Result<World, SynthError> {
    let net = config.network.build()?;
    if !net.is_connected() {
        return Err(SynthError::Config("network is not connected".into()));
    }
    if !(config.behavior.abandon_rate > 0.0 && config.behavior.abandon_rate < 1.0) {
        return Err(SynthError::Config("abandon_rate must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let days = weekday_list(config.start_date, config.weekdays, &config.excluded_dates);
    let mut calendar = Calendar::new();
    let mut d = config.start_date;
    while d <= *days.last().expect("at least one weekday") {
        let kind = if days.contains(&d) { DayKind::Weekday } else { DayKind::Excluded };
        calendar.insert(d, kind);
        d = d.succ_opt().unwrap();
    }

    // Events: explicit ones first, then random ones on unused days.
    let mut events = config.events.clone();
    for e in &events {
        e.validate(Some(&net)).map_err(|err| SynthError::InfeasibleEvent { id: e.event_id, why: err.to_string() })?;
        if !days.contains(&e.date) {
            return Err(SynthError::InfeasibleEvent { id: e.event_id, why: format!("{} is not a generated weekday", e.date) });
        }
    }
    let mut used: BTreeSet<NaiveDate> = events.iter().map(|e| e.date).collect();
    if used.len() != events.len() {
        return Err(SynthError::Config("configured events must fall on distinct dates".into()));
    }
    let mut free: Vec<NaiveDate> = days.iter().copied().filter(|d| !used.contains(d)).collect();
    if free.len() < config.random_events {
        return Err(SynthError::Config("more random events than free weekdays".into()));
    }
    free.shuffle(&mut rng);
    let mut next_id = events.iter().map(|e| e.event_id).max().unwrap_or(0) + 1;
    for &date in free.iter().take(config.random_events) {
        events.push(random_event(&net, next_id, date, &mut rng));
        used.insert(date);
        next_id += 1;
    }
    events.sort_by_key(|e| e.event_id);
    let event_by_date: BTreeMap<NaiveDate, &DelayEvent> = events.iter().map(|e| (e.date, e)).collect();
    let normal_days: Vec<NaiveDate> = days.iter().copied().filter(|d| !used.contains(d)).collect();

    let min_regular_days = config.screen.day_threshold + 2;
    if normal_days.len() < min_regular_days {
        return Err(SynthError::Config(format!(
            "{} normal weekdays cannot support regulars needing {min_regular_days} travel days",
            normal_days.len()
        )));
    }
    if config.screen.od_day_threshold < 3 || config.screen.day_threshold < 3 {
        return Err(SynthError::Config("screening thresholds too small to plant casual passengers".into()));
    }

    // Card ids.
    let total = config.regulars + config.casual_high + config.casual_low;
    let mut ids: BTreeSet<u32> = BTreeSet::new();
    while ids.len() < total {
        ids.insert(rng.gen_range(100_000_000..1_000_000_000));
    }
    let mut ids: Vec<String> = ids.into_iter().map(|i| i.to_string()).collect();
    ids.shuffle(&mut rng);
    let (regular_ids, rest) = ids.split_at(config.regulars);
    let (high_ids, low_ids) = rest.split_at(config.casual_high);

    let station_names: Vec<String> = net.stations().iter().map(|s| s.name.clone()).collect();
    let mut routes = RouteTable { net: &net, cache: HashMap::new() };
    let spec = &config.pattern;
    let uni = |rng: &mut ChaCha8Rng, (a, b): (f64, f64)| if b > a { rng.gen_range(a..=b) } else { a };

    let plans: Vec<RegularPlan> = regular_ids
        .iter()
        .map(|card| {
            let pair: Vec<&String> = station_names.choose_multiple(&mut rng, 2).collect();
            RegularPlan {
                card: card.clone(),
                home: pair[0].clone(),
                work: pair[1].clone(),
                centers: [uni(&mut rng, spec.morning_center), uni(&mut rng, spec.evening_center)],
                jitter: uni(&mut rng, spec.jitter),
            }
        })
        .collect();

    let mut normal_trips: Vec<Planned> = Vec::new();
    let mut bus: Vec<AfcRecord> = Vec::new();
    let mut intended: BTreeMap<(NaiveDate, String), Vec<Planned>> = BTreeMap::new();

    // Regulars: both pattern trips on every travel day; always intend to travel on event days.
    for p in &plans {
        let k = rng.gen_range(min_regular_days..=normal_days.len());
        let travel: BTreeSet<NaiveDate> = normal_days.choose_multiple(&mut rng, k).copied().collect();
        for &date in &days {
            let event_day = event_by_date.contains_key(&date);
            if !event_day && !travel.contains(&date) {
                continue;
            }
            let mut today = Vec::new();
            for (i, (o, d)) in p.ods().into_iter().enumerate() {
                let j = rng.gen_range(-p.jitter..=p.jitter);
                let extra = rng.gen_range(0.0..=spec.duration_jitter.max(0.0));
                today.push(plan_trip(&mut routes, &p.card, o, d, date, minutes_to_secs(p.centers[i] + j), extra)?);
            }
            if event_day {
                intended.insert((date, p.card.clone()), today);
            } else {
                normal_trips.extend(today);
            }
        }
    }

    // Casual passengers.
    let casual_day = |rng: &mut ChaCha8Rng, routes: &mut RouteTable, card: &str, date: NaiveDate, od: (&str, &str), back: bool| -> Result<Vec<Planned>, NetworkError> {
        let first = plan_trip(routes, card, od.0, od.1, date, rng.gen_range(360 * 60..720 * 60), rng.gen_range(0.0..3.0))?;
        let mut out = vec![first];
        if back {
            let after = (out[0].trip.exit_time - date.and_time(NaiveTime::MIN)).num_seconds() + rng.gen_range(1800..14_400);
            if after < 1380 * 60 {
                out.push(plan_trip(routes, card, od.1, od.0, date, after, rng.gen_range(0.0..3.0))?);
            }
        }
        Ok(out)
    };
    let cap = config.screen.od_day_threshold - 2;
    for card in high_ids {
        let k = rng.gen_range(min_regular_days..=days.len());
        let mut travel: Vec<NaiveDate> = days.choose_multiple(&mut rng, k).copied().collect();
        travel.sort();
        let pool_size = k.div_ceil(cap) + 2;
        let pool: Vec<(String, String)> = (0..pool_size)
            .map(|_| {
                let pair: Vec<&String> = station_names.choose_multiple(&mut rng, 2).collect();
                (pair[0].clone(), pair[1].clone())
            })
            .collect();
        // Distinct random pairs may still coincide; count per OD and fall back when full.
        let mut used_days: HashMap<(String, String), usize> = HashMap::new();
        for (i, &date) in travel.iter().enumerate() {
            let (o, d) = {
                let mut pick = pool[i % pool.len()].clone();
                let mut tries = 0;
                while used_days.get(&pick).copied().unwrap_or(0) >= cap
                    || used_days.get(&(pick.1.clone(), pick.0.clone())).copied().unwrap_or(0) >= cap
                {
                    let pair: Vec<&String> = station_names.choose_multiple(&mut rng, 2).collect();
                    pick = (pair[0].clone(), pair[1].clone());
                    tries += 1;
                    if tries > 1000 {
                        return Err(SynthError::Config("network too small for casual passengers".into()));
                    }
                }
                pick
            };
            let back = rng.gen_bool(0.7);
            *used_days.entry((o.clone(), d.clone())).or_default() += 1;
            if back {
                *used_days.entry((d.clone(), o.clone())).or_default() += 1;
            }
            normal_trips.extend(casual_day(&mut rng, &mut routes, card, date, (&o, &d), back)?);
            if rng.gen_bool(0.1) {
                bus.push(bus_record(card, at(date, rng.gen_range(360 * 60..1320 * 60)), &mut rng));
            }
        }
    }
    let low_cap = config.screen.day_threshold - 2;
    for card in low_ids {
        let k = rng.gen_range(1..=low_cap);
        let pair: Vec<&String> = station_names.choose_multiple(&mut rng, 2).collect();
        let (o, d) = (pair[0].clone(), pair[1].clone());
        for &date in days.choose_multiple(&mut rng, k) {
            normal_trips.extend(casual_day(&mut rng, &mut routes, card, date, (&o, &d), true)?);
        }
        if rng.gen_bool(0.3) {
            let date = *days.choose(&mut rng).unwrap();
            bus.push(bus_record(card, at(date, rng.gen_range(360 * 60..1320 * 60)), &mut rng));
        }
    }

    // Truth patterns from each regular's normal-day trips.
    let normal_only: Vec<Trip> = normal_trips.iter().filter(|p| !used.contains(&p.trip.date())).map(|p| p.trip.clone()).collect();
    let screened: BTreeSet<String> = screen_regulars(&normal_only, config.screen).into_iter().map(|c| c.card_id).collect();
    let planted: BTreeSet<String> = regular_ids.iter().cloned().collect();
    if screened != planted {
        let extra = screened.difference(&planted).count();
        let missing = planted.difference(&screened).count();
        return Err(SynthError::Inconsistent(format!("screening margin violated: {extra} extra, {missing} missing")));
    }
    let mut per_card: BTreeMap<&str, Vec<&Trip>> = BTreeMap::new();
    for t in &normal_only {
        if planted.contains(&t.card_id) {
            per_card.entry(t.card_id.as_str()).or_default().push(t);
        }
    }
    let mut patterns: Vec<TravelPattern> = Vec::new();
    for trips in per_card.values() {
        patterns.extend(mine_patterns(trips, config.cluster));
    }
    let mut patterns_by_card: BTreeMap<String, Vec<TravelPattern>> = BTreeMap::new();
    for p in &patterns {
        patterns_by_card.entry(p.card_id.clone()).or_default().push(p.clone());
    }

    // Affected instances and planted behavior.
    let affected = identify_affected(&patterns, &events, &net, config.impact);
    struct Draft<'a> {
        inst: &'a AffectedInstance,
        pattern: &'a TravelPattern,
        event: &'a DelayEvent,
        entry_secs: i64,
        started: bool,
        score: f64,
    }
    let mut drafts: Vec<Draft> = Vec::with_capacity(affected.len());
    for inst in &affected {
        let event = events.iter().find(|e| e.event_id == inst.event_id).expect("event exists");
        let pattern = patterns_by_card[&inst.card_id].iter().find(|p| p.key() == inst.pattern_key).expect("pattern exists");
        let trip = intended[&(event.date, inst.card_id.clone())]
            .iter()
            .find(|p| p.trip.origin == pattern.origin && p.trip.dest == pattern.dest)
            .ok_or_else(|| SynthError::Inconsistent(format!("no planned trip for pattern {}", pattern.key())))?;
        let entry_secs = (trip.trip.entry_time - event.date.and_time(NaiveTime::MIN)).num_seconds();
        let t = entry_secs as f64 / 60.0;
        let started = t <= event.start_minutes() && t >= pattern.entry_mean - 3.0 * pattern.entry_std.max(15.0);
        let v2 = config.peaks.bucket(event.start);
        let score = config.behavior.score(v2, pattern.mean_duration, started, pattern.entry_std, rng.gen::<f64>());
        drafts.push(Draft { inst, pattern, event, entry_secs, started, score });
    }
    let n_abandon = (config.behavior.abandon_rate * drafts.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.sort_by(|&a, &b| drafts[b].score.total_cmp(&drafts[a].score).then(a.cmp(&b)));
    let abandon: BTreeSet<usize> = order[..n_abandon].iter().copied().collect();

    let slack = config.label.slack_minutes;
    let mut labels = Vec::with_capacity(drafts.len());
    let mut replaced: BTreeMap<(NaiveDate, String), Vec<(String, String, Option<Planned>)>> = BTreeMap::new();
    for (i, dr) in drafts.iter().enumerate() {
        let ev = dr.event;
        let key = (ev.date, dr.inst.card_id.clone());
        let (start, end) = (ev.start_minutes(), ev.end_minutes());
        let mut noisy = false;
        let mut bus_tap = false;
        let new_trip = if abandon.contains(&i) {
            if dr.started {
                // Entered, gave up inside the delay window and left at the origin.
                let entry = dr.entry_secs;
                let lo = minutes_to_secs(start).max(entry + 60);
                let hi = minutes_to_secs(end).min(lo + 15 * 60).max(lo);
                let exit = rng.gen_range(lo..=hi);
                let line = routes.get(&dr.pattern.origin, &dr.pattern.dest).map(|r| operator(r, true))?;
                Some(Planned {
                    trip: Trip {
                        card_id: dr.inst.card_id.clone(),
                        origin: dr.pattern.origin.clone(),
                        entry_time: at(ev.date, entry),
                        dest: dr.pattern.origin.clone(),
                        exit_time: at(ev.date, exit),
                    },
                    entry_line: line.clone(),
                    exit_line: line,
                })
            } else {
                None
            }
        } else {
            let mut entry = dr.entry_secs;
            let lo = dr.pattern.entry_mean - 3.0 * dr.pattern.entry_std - slack;
            let hi = end + slack;
            if config.behavior.noise_rate > 0.0 && rng.gen_bool(config.behavior.noise_rate.min(1.0)) {
                noisy = true;
                entry = minutes_to_secs(hi) + rng.gen_range(300..1800);
            } else {
                entry = entry.clamp(minutes_to_secs(lo).max(0) + 1, minutes_to_secs(hi) - 1);
            }
            let wait_extra = (end - (entry as f64 / 60.0).max(start)).max(0.0) * rng.gen_range(0.3..0.9);
            Some(plan_trip(&mut routes, &dr.inst.card_id, &dr.pattern.origin, &dr.pattern.dest, ev.date, entry, wait_extra)?)
        };
        if abandon.contains(&i) && rng.gen_bool(config.behavior.bus_tap_prob) {
            bus_tap = true;
            let ts = rng.gen_range(minutes_to_secs(start)..=minutes_to_secs((end + slack).min(1439.0)));
            bus.push(bus_record(&dr.inst.card_id, at(ev.date, ts), &mut rng));
        }
        replaced.entry(key).or_default().push((dr.pattern.origin.clone(), dr.pattern.dest.clone(), new_trip));
        labels.push(TruthLabel {
            card_id: dr.inst.card_id.clone(),
            event_id: ev.event_id,
            label: if abandon.contains(&i) { ChoiceLabel::Abandon } else { ChoiceLabel::Wait },
            started: dr.started,
            bus_tap,
            noisy,
        });
    }

    // Event-day trips: intended trips with affected ones swapped for the planted behavior.
    let mut event_trips: BTreeMap<(NaiveDate, String), Vec<Planned>> = BTreeMap::new();
    for (key, plannedv) in &intended {
        let swaps = replaced.get(key);
        let mut out = Vec::new();
        for p in plannedv {
            match swaps.and_then(|s| s.iter().find(|(o, d, _)| *o == p.trip.origin && *d == p.trip.dest)) {
                Some((_, _, Some(np))) => out.push(np.clone()),
                Some((_, _, None)) => {}
                None => out.push(p.clone()),
            }
        }
        // Keep each day's taps strictly sequential.
        out.sort_by_key(|p| p.trip.entry_time);
        for w in 1..out.len() {
            if out[w].trip.entry_time <= out[w - 1].trip.exit_time {
                return Err(SynthError::Inconsistent(format!("overlapping trips for card {} on {}", key.1, key.0)));
            }
        }
        event_trips.insert(key.clone(), out);
    }

    // Self-check: with no noise every planted label must be recoverable.
    let bus_by_card: HashMap<&str, Vec<AfcRecord>> = bus.iter().fold(HashMap::new(), |mut m, r| {
        m.entry(r.card_id.as_str()).or_insert_with(Vec::new).push(r.clone());
        m
    });
    for (dr, truth) in drafts.iter().zip(&labels) {
        if truth.noisy {
            continue;
        }
        let trips: Vec<Trip> = event_trips[&(dr.event.date, dr.inst.card_id.clone())].iter().map(|p| p.trip.clone()).collect();
        let recs = bus_by_card.get(dr.inst.card_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let got = label_choice(&trips, recs, dr.pattern, dr.event, config.label);
        if got.label != truth.label {
            return Err(SynthError::Inconsistent(format!(
                "card {} event {}: planted {} but records say {}",
                truth.card_id, truth.event_id, truth.label, got.label
            )));
        }
    }

    let mut records: Vec<AfcRecord> = normal_trips
        .iter()
        .chain(event_trips.values().flatten())
        .flat_map(metro_records)
        .chain(bus)
        .collect();
    records.sort_by(|a, b| {
        (a.timestamp, &a.card_id, a.txn_type, &a.location).cmp(&(b.timestamp, &b.card_id, b.txn_type, &b.location))
    });

    let narratives = events.iter().enumerate().map(|(i, e)| render_narrative(e, &net, i % N_TEMPLATES)).collect();
    let planted_centers = plans.iter().map(|p| (p.card.clone(), p.centers.to_vec())).collect();
    let mut regulars: Vec<String> = regular_ids.to_vec();
    regulars.sort();
    Ok(World {
        network_config: config.network.clone(),
        network: net.clone(),
        calendar,
        weekdays: days,
        records,
        events,
        narratives,
        truth: GroundTruth { regulars, planted_centers, patterns, affected, labels },
    })
}

pub const N_TEMPLATES: usize = 4;

fn cause_phrase(t: DelayType) -> &'static str {
    match t {
        DelayType::VehicleFault => "a vehicle fault",
        DelayType::SignalingFault => "a signaling fault",
        DelayType::PowerFault => "a power fault",
        DelayType::ImproperOperation => "an improper operation by station staff",
        DelayType::Others => "an object jamming the door",
    }
}

fn clock12(t: NaiveTime) -> String {
    t.format("%-I:%M %p").to_string()
}

fn mid_time(e: &DelayEvent) -> NaiveTime {
    let span = (e.end - e.start).num_minutes().max(1);
    e.start + Duration::minutes((span / 3).max(1))
}

/// Far end of the event's line in its direction of travel.
fn terminus(e: &DelayEvent, net: &Network) -> Option<String> {
    let line = net.line(&e.line)?;
    let id = match e.direction {
        Direction::Up => *line.stations.last()?,
        Direction::Down => *line.stations.first()?,
    };
    Some(net.station_name(id).to_string())
}

/// Renders a delay narrative for `event` using template `template`
/// (taken modulo [`N_TEMPLATES`]).
pub fn render_narrative(e: &DelayEvent, net: &Network, template: usize) -> String {
    let dir = e.direction.as_str().to_ascii_lowercase();
    let cause = cause_phrase(e.delay_type);
    match template % N_TEMPLATES {
        0 => format!(
            "Event #{id}: On {date}, at {start}, {cause} was reported on {line} between {from} and {to} in the {dir} \
             direction. Dispatch ordered trains to run at reduced speed while staff attended. Normal service was \
             restored at {end}.",
            id = e.event_id,
            date = e.date.format("%B %-d, %Y"),
            start = clock12(e.start),
            line = e.line,
            from = e.from_station,
            to = e.to_station,
            end = clock12(e.end),
        ),
        1 => format!(
            "Event #{id} | {date} | {line}.\n{start} {cause} affected {dir}bound trains from {from} to {to}; trains \
             were held at platforms.\n{mid} fault cleared.\n{end} service resumed in both directions.",
            id = e.event_id,
            date = e.date.format("%Y-%m-%d"),
            line = e.line,
            start = e.start.format("%H:%M"),
            from = e.from_station,
            to = e.to_station,
            mid = mid_time(e).format("%H:%M"),
            end = e.end.format("%H:%M"),
        ),
        2 => format!(
            "Event #{id}. At {start} on {date}, {cause} on {line} disrupted {dir} line services between {from} and \
             {to}. Passengers were advised to use alternative routes. Services recovered fully at {end}.",
            id = e.event_id,
            start = e.start.format("%H:%M"),
            date = e.date.format("%-d %B %Y"),
            line = e.line,
            from = e.from_station,
            to = e.to_station,
            end = e.end.format("%H:%M"),
        ),
        _ => {
            let tail = match terminus(e, net) {
                Some(t) if t != e.from_station && t != e.to_station => format!("Trains destined for {t} ran late, and the"),
                _ => "The".to_string(),
            };
            format!(
                "Event #{id}: On {date}, at {start}, the driver of train {train:05} reported {cause} at {from} on the \
                 {dir} line of {line}, and trains behind it were held. By {mid}, the fault had been removed. {tail} \
                 last delayed train cleared {to} at {end}, after which normal service resumed.",
                id = e.event_id,
                date = e.date.format("%B %-d, %Y"),
                start = clock12(e.start),
                train = 3503 + 200 * e.event_id,
                from = e.from_station,
                line = e.line,
                mid = clock12(mid_time(e)),
                to = e.to_station,
                end = clock12(e.end),
            )
        }
    }
}

/// A labelled choice set drawn directly from the planted rule, without a
/// world around it.
pub fn choice_records(n: usize, behavior: &BehaviorParams, seed: u64) -> Vec<ChoiceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recs: Vec<(ChoiceRecord, f64)> = (0..n)
        .map(|i| {
            let v2 = match rng.gen_range(0..10) {
                0..=5 => DelayPeriod::MorningPeak,
                6..=7 => DelayPeriod::EveningPeak,
                _ => DelayPeriod::OffPeak,
            };
            let p1 = rng.gen_range(10.0..80.0);
            let p2 = rng.gen_bool(0.3);
            let p3 = rng.gen_range(0.5..12.0);
            let score = behavior.score(v2, p1, p2, p3, rng.gen::<f64>());
            let r = ChoiceRecord {
                card_id: format!("{:09}", 100_000_000 + i),
                event_id: (i % 14) as u32 + 1,
                v1: *DelayType::ALL.choose(&mut rng).unwrap(),
                v2,
                p1,
                p2,
                p3,
                label: Some(ChoiceLabel::Wait),
            };
            (r, score)
        })
        .collect();
    let k = (behavior.abandon_rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| recs[b].1.total_cmp(&recs[a].1).then(a.cmp(&b)));
    for &i in &order[..k] {
        recs[i].0.label = Some(ChoiceLabel::Abandon);
    }
    recs.into_iter().map(|(r, _)| r).collect()
}

pub const TRUTH_LABEL_HEADER: [&str; 6] = ["card_id", "event_id", "label", "started", "bus_tap", "noisy"];

pub fn write_truth_labels<W: Write>(labels: &[TruthLabel], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRUTH_LABEL_HEADER)?;
    for l in labels {
        w.serialize((&l.card_id, l.event_id, l.label.as_str(), l.started, l.bus_tap, l.noisy))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth_labels<R: Read>(source: R) -> Result<Vec<TruthLabel>, csv::Error> {
    let mut rdr = csv::Reader::from_reader(source);
    rdr.deserialize::<(String, u32, ChoiceLabel, bool, bool, bool)>()
        .map(|r| r.map(|(card_id, event_id, label, started, bus_tap, noisy)| TruthLabel { card_id, event_id, label, started, bus_tap, noisy }))
        .collect()
}

/// File names inside a world directory.
pub mod files {
    pub const NETWORK: &str = "network.toml";
    pub const CALENDAR: &str = "calendar.csv";
    pub const AFC: &str = "afc.csv";
    pub const DELAYS: &str = "delays.csv";
    pub const NARRATIVES: &str = "narratives.txt";
    pub const TRUTH_DIR: &str = "truth";
    pub const TRUTH_REGULARS: &str = "truth/regulars.csv";
    pub const TRUTH_PATTERNS: &str = "truth/patterns.csv";
    pub const TRUTH_AFFECTED: &str = "truth/affected.jsonl";
    pub const TRUTH_LABELS: &str = "truth/labels.csv";
}

impl World {
    /// Serialized form of every output, keyed by relative path.
    pub fn render_files(&self) -> Result<BTreeMap<&'static str, Vec<u8>>, SynthError> {
        let io_err = |e: csv::Error| SynthError::Io(io::Error::other(e.to_string()));
        let mut out = BTreeMap::new();
        out.insert(files::NETWORK, self.network_config.to_toml_string().into_bytes());
        let mut buf = Vec::new();
        self.calendar.write(&mut buf).map_err(|e| SynthError::Io(io::Error::other(e.to_string())))?;
        out.insert(files::CALENDAR, buf);
        let mut buf = Vec::new();
        write_afc(&self.records, &mut buf).map_err(|e| SynthError::Io(io::Error::other(e.to_string())))?;
        out.insert(files::AFC, buf);
        let mut buf = Vec::new();
        write_delay_table(&self.events, &mut buf).map_err(io_err)?;
        out.insert(files::DELAYS, buf);
        out.insert(files::NARRATIVES, (self.narratives.join("\n\n") + "\n").into_bytes());
        let mut regs = String::from("card_id\n");
        for r in &self.truth.regulars {
            regs.push_str(r);
            regs.push('\n');
        }
        out.insert(files::TRUTH_REGULARS, regs.into_bytes());
        let mut buf = Vec::new();
        write_patterns(&self.truth.patterns, &mut buf)?;
        out.insert(files::TRUTH_PATTERNS, buf);
        let mut buf = Vec::new();
        write_jsonl(&self.truth.affected, &mut buf)?;
        out.insert(files::TRUTH_AFFECTED, buf);
        let mut buf = Vec::new();
        write_truth_labels(&self.truth.labels, &mut buf).map_err(io_err)?;
        out.insert(files::TRUTH_LABELS, buf);
        Ok(out)
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir.join(files::TRUTH_DIR))?;
        for (name, bytes) in self.render_files()? {
            crate::io::write_atomic(&dir.join(name), &bytes)?;
        }
        Ok(())
    }
}
