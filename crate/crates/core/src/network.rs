//! Static metro network: lines, stations, directions and deterministic route
//! inference between an origin and a destination station.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("line list is empty")]
    EmptyLineList,
    #[error("line {line} has fewer than two stations")]
    ShortLine { line: String },
    #[error("station {station} appears twice on line {line}")]
    DuplicateStationInLine { line: String, station: String },
    #[error("duplicate line id {0}")]
    DuplicateLine(String),
    #[error("empty station name on line {0}")]
    EmptyStationName(String),
    #[error("timing constant {name} must be positive, got {value}")]
    NonPositiveTiming { name: &'static str, value: f64 },
    #[error("unknown station {0}")]
    UnknownStation(String),
    #[error("origin and destination are the same station ({0})")]
    SameStation(String),
    #[error("no route from {from} to {to}")]
    Unreachable { from: String, to: String },
    #[error("reading network config: {0}")]
    Io(String),
    #[error("parsing network config: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StationId(pub u32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Station {
    pub id: StationId,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Increasing station index along the line's declared order.
    Up,
    Down,
}

impl Direction {
    pub fn flip(self) -> Direction {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "Up",
            Direction::Down => "Down",
        }
    }

    pub fn parse(s: &str) -> Option<Direction> {
        match s.trim().to_ascii_lowercase().as_str() {
            "up" => Some(Direction::Up),
            "down" => Some(Direction::Down),
            _ => None,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub id: String,
    pub stations: Vec<StationId>,
    pub hop_runtime: f64,
}

impl Line {
    pub fn position(&self, station: StationId) -> Option<usize> {
        self.stations.iter().position(|&s| s == station)
    }

    pub fn hop_count(&self) -> usize {
        self.stations.len() - 1
    }
}

/// Timing constants, all in minutes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkParams {
    pub hop_runtime: f64,
    pub access_time: f64,
    pub transfer_penalty: f64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        NetworkParams {
            hop_runtime: 2.5,
            access_time: 5.0,
            transfer_penalty: 4.0,
        }
    }
}

/// One line as it appears in a network config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineDef {
    pub id: String,
    pub stations: Vec<String>,
}

impl LineDef {
    pub fn new(id: &str, stations: &[&str]) -> Self {
        LineDef {
            id: id.to_string(),
            stations: stations.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// On-disk network description (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(flatten)]
    pub params: NetworkParams,
    pub lines: Vec<LineDef>,
}

impl NetworkConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, NetworkError> {
        toml::from_str(text).map_err(|e| NetworkError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NetworkError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("network config serializes")
    }

    pub fn build(&self) -> Result<Network, NetworkError> {
        build_network(&self.lines, self.params)
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    stations: Vec<Station>,
    by_name: HashMap<String, StationId>,
    lines: Vec<Line>,
    params: NetworkParams,
}

/// Builds a network from ordered station-name lists. Stations with the same
/// name on different lines are the same station (an interchange).
pub fn build_network(line_defs: &[LineDef], params: NetworkParams) -> Result<Network, NetworkError> {
    if line_defs.is_empty() {
        return Err(NetworkError::EmptyLineList);
    }
    for (name, value) in [
        ("hop_runtime", params.hop_runtime),
        ("access_time", params.access_time),
        ("transfer_penalty", params.transfer_penalty),
    ] {
        // access and transfer may be zero; hops must take time
        let bad = if name == "hop_runtime" { !(value > 0.0) } else { !(value >= 0.0) };
        if bad || !value.is_finite() {
            return Err(NetworkError::NonPositiveTiming { name, value });
        }
    }

    let mut stations = Vec::new();
    let mut by_name: HashMap<String, StationId> = HashMap::new();
    let mut lines = Vec::with_capacity(line_defs.len());
    let mut seen_lines = BTreeSet::new();

    for def in line_defs {
        if !seen_lines.insert(def.id.clone()) {
            return Err(NetworkError::DuplicateLine(def.id.clone()));
        }
        if def.stations.len() < 2 {
            return Err(NetworkError::ShortLine { line: def.id.clone() });
        }
        let mut ids = Vec::with_capacity(def.stations.len());
        for raw in &def.stations {
            let name = raw.trim();
            if name.is_empty() {
                return Err(NetworkError::EmptyStationName(def.id.clone()));
            }
            let id = *by_name.entry(name.to_string()).or_insert_with(|| {
                let id = StationId(stations.len() as u32);
                stations.push(Station { id, name: name.to_string() });
                id
            });
            if ids.contains(&id) {
                return Err(NetworkError::DuplicateStationInLine {
                    line: def.id.clone(),
                    station: name.to_string(),
                });
            }
            ids.push(id);
        }
        lines.push(Line {
            id: def.id.clone(),
            stations: ids,
            hop_runtime: params.hop_runtime,
        });
    }

    Ok(Network { stations, by_name, lines, params })
}

impl Network {
    pub fn params(&self) -> NetworkParams {
        self.params
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn station(&self, id: StationId) -> &Station {
        &self.stations[id.0 as usize]
    }

    pub fn station_name(&self, id: StationId) -> &str {
        &self.station(id).name
    }

    pub fn station_id(&self, name: &str) -> Option<StationId> {
        self.by_name.get(name.trim()).copied()
    }

    pub fn line(&self, id: &str) -> Option<&Line> {
        self.lines.iter().find(|l| l.id == id)
    }

    /// Lines serving a station, in declaration order.
    pub fn lines_at(&self, station: StationId) -> Vec<&Line> {
        self.lines.iter().filter(|l| l.stations.contains(&station)).collect()
    }

    pub fn is_interchange(&self, station: StationId) -> bool {
        self.lines_at(station).len() > 1
    }

    pub fn interchanges(&self) -> Vec<StationId> {
        self.stations
            .iter()
            .map(|s| s.id)
            .filter(|&s| self.is_interchange(s))
            .collect()
    }

    pub fn hop_count(&self) -> usize {
        self.lines.iter().map(Line::hop_count).sum()
    }

    pub fn is_connected(&self) -> bool {
        if self.stations.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.stations.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(s) = stack.pop() {
            for line in self.lines_at(StationId(s as u32)) {
                for w in line.stations.windows(2) {
                    let (a, b) = (w[0].0 as usize, w[1].0 as usize);
                    for (x, y) in [(a, b), (b, a)] {
                        if x == s && !seen[y] {
                            seen[y] = true;
                            stack.push(y);
                        }
                    }
                }
            }
        }
        seen.into_iter().all(|v| v)
    }

    /// Station names in the order they first appear in the line list.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.stations.iter().map(|s| s.name.as_str())
    }

    pub fn shortest_route_by_name(&self, origin: &str, dest: &str) -> Result<Route, NetworkError> {
        let o = self
            .station_id(origin)
            .ok_or_else(|| NetworkError::UnknownStation(origin.to_string()))?;
        let d = self
            .station_id(dest)
            .ok_or_else(|| NetworkError::UnknownStation(dest.to_string()))?;
        self.shortest_route(o, d)
    }

    /// Minimum-transfer route; ties broken by fewest hops, then by the
    /// lexicographic sequence of line ids.
    pub fn shortest_route(&self, origin: StationId, dest: StationId) -> Result<Route, NetworkError> {
        for s in [origin, dest] {
            if s.0 as usize >= self.stations.len() {
                return Err(NetworkError::UnknownStation(format!("#{}", s.0)));
            }
        }
        if origin == dest {
            return Err(NetworkError::SameStation(self.station_name(origin).to_string()));
        }

        // Search state: (station, line index). Labels carry the full line
        // sequence so the tie-break is exact.
        let mut best: HashMap<(StationId, usize), Label> = HashMap::new();
        let mut heap = BinaryHeap::new();
        for (li, line) in self.lines.iter().enumerate() {
            if line.stations.contains(&origin) {
                let label = Label {
                    transfers: 0,
                    hops: 0,
                    lines: vec![line.id.clone()],
                    path: vec![(origin, li)],
                };
                best.insert((origin, li), label.clone());
                heap.push(Reverse(label));
            }
        }

        let mut found: Option<Label> = None;
        while let Some(Reverse(label)) = heap.pop() {
            let &(station, li) = label.path.last().expect("non-empty path");
            if best.get(&(station, li)).is_some_and(|b| b.key_cmp(&label) == Ordering::Less) {
                continue;
            }
            if station == dest {
                found = Some(label);
                break;
            }
            let line = &self.lines[li];
            let pos = line.position(station).expect("station on its line");
            let mut next = Vec::new();
            if pos > 0 {
                next.push((line.stations[pos - 1], li, false));
            }
            if pos + 1 < line.stations.len() {
                next.push((line.stations[pos + 1], li, false));
            }
            for (lj, other) in self.lines.iter().enumerate() {
                if lj != li && other.stations.contains(&station) {
                    next.push((station, lj, true));
                }
            }
            for (s, lj, transfer) in next {
                let mut cand = label.clone();
                if transfer {
                    cand.transfers += 1;
                    cand.lines.push(self.lines[lj].id.clone());
                } else {
                    cand.hops += 1;
                }
                cand.path.push((s, lj));
                let better = match best.get(&(s, lj)) {
                    Some(b) => cand.key_cmp(b) == Ordering::Less,
                    None => true,
                };
                if better {
                    best.insert((s, lj), cand.clone());
                    heap.push(Reverse(cand));
                }
            }
        }

        let label = found.ok_or_else(|| NetworkError::Unreachable {
            from: self.station_name(origin).to_string(),
            to: self.station_name(dest).to_string(),
        })?;
        Ok(self.route_from_path(&label.path))
    }

    fn route_from_path(&self, path: &[(StationId, usize)]) -> Route {
        let mut legs: Vec<Leg> = Vec::new();
        let mut offsets = vec![self.params.access_time];
        let mut stations = vec![path[0].0];
        let mut t = self.params.access_time;

        for w in path.windows(2) {
            let (s0, _) = w[0];
            let (s1, l1) = w[1];
            if s0 == s1 {
                // transfer at s0 onto line l1
                t += self.params.transfer_penalty;
                continue;
            }
            let line = &self.lines[l1];
            let p0 = line.position(s0).expect("on line");
            let p1 = line.position(s1).expect("on line");
            let dir = if p1 > p0 { Direction::Up } else { Direction::Down };
            match legs.last_mut() {
                Some(leg) if leg.line == line.id && leg.direction == dir && *leg.stations.last().unwrap() == s0 => {
                    leg.stations.push(s1);
                }
                _ => legs.push(Leg {
                    line: line.id.clone(),
                    direction: dir,
                    stations: vec![s0, s1],
                }),
            }
            t += line.hop_runtime;
            stations.push(s1);
            offsets.push(t);
        }

        Route { legs, stations, cumulative_offsets: offsets }
    }
}

#[derive(Clone, Debug)]
struct Label {
    transfers: u32,
    hops: u32,
    lines: Vec<String>,
    path: Vec<(StationId, usize)>,
}

impl Label {
    fn key_cmp(&self, other: &Label) -> Ordering {
        (self.transfers, self.hops, &self.lines).cmp(&(other.transfers, other.hops, &other.lines))
    }
}

struct Reverse(Label);

impl PartialEq for Reverse {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Reverse {}
impl PartialOrd for Reverse {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Reverse {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .key_cmp(&self.0)
            .then_with(|| other.0.path.cmp(&self.0.path))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Leg {
    pub line: String,
    pub direction: Direction,
    /// Stations visited on this leg, boarding station first.
    pub stations: Vec<StationId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub legs: Vec<Leg>,
    /// Every station on the route once, in travel order.
    pub stations: Vec<StationId>,
    /// Minutes from the entry tap to arrival at `stations[i]`.
    pub cumulative_offsets: Vec<f64>,
}

impl Route {
    pub fn transfers(&self) -> usize {
        self.legs.len().saturating_sub(1)
    }

    pub fn hops(&self) -> usize {
        self.stations.len() - 1
    }

    pub fn offset_of(&self, station: StationId) -> Option<f64> {
        self.stations
            .iter()
            .position(|&s| s == station)
            .map(|i| self.cumulative_offsets[i])
    }

    pub fn total_time(&self) -> f64 {
        *self.cumulative_offsets.last().expect("route has offsets")
    }
}
