#![allow(dead_code)]

use std::path::Path;

use chrono::{NaiveTime, Timelike};
use metro_choice::delay::DelayEvent;
use metro_choice::network::{Direction, Network};
use metro_choice::patterns::TravelPattern;
use metro_choice::pipeline::{run_stage, PipelineConfig, Stage};
use metro_choice::synth::WorldConfig;

pub fn minutes(t: NaiveTime) -> f64 {
    t.hour() as f64 * 60.0 + t.minute() as f64 + t.second() as f64 / 60.0
}

/// Walks every station of the route, times its expected passage window, and
/// reports the first route hop that runs between two adjacent interval
/// stations on the event line in the event direction and whose boarding
/// station's window meets the delay.
pub fn overlap_oracle(net: &Network, p: &TravelPattern, e: &DelayEvent, pad: f64) -> Option<Vec<String>> {
    let route = net.shortest_route_by_name(&p.origin, &p.dest).ok()?;
    let line = net.line(&e.line)?;
    let pos = |name: &str| line.stations.iter().position(|&s| net.station_name(s) == name);
    let (a, b) = (pos(&e.from_station)?, pos(&e.to_station)?);
    let (lo, hi) = (a.min(b), a.max(b));
    let step: isize = if e.direction == Direction::Up { 1 } else { -1 };
    let names: Vec<&str> = route.stations.iter().map(|&s| net.station_name(s)).collect();
    let inside = |name: &str| pos(name).filter(|&q| q >= lo && q <= hi);

    let mut first: Option<usize> = None;
    for i in 0..names.len().saturating_sub(1) {
        if let (Some(x), Some(y)) = (inside(names[i]), inside(names[i + 1])) {
            if y as isize - x as isize == step {
                first = Some(i);
                break;
            }
        }
    }
    let i = first?;
    let mut run = vec![names[i].to_string()];
    let mut k = i;
    while k + 1 < names.len() {
        match (inside(names[k]), inside(names[k + 1])) {
            (Some(x), Some(y)) if y as isize - x as isize == step => run.push(names[k + 1].to_string()),
            _ => break,
        }
        k += 1;
    }
    let t = route.cumulative_offsets[i];
    let lo_t = p.entry_mean - p.entry_std - pad + t;
    let hi_t = p.entry_mean + p.entry_std + pad + t;
    let (s, f) = (minutes(e.start), minutes(e.end));
    (lo_t <= f && s <= hi_t).then_some(run)
}

/// Pipeline config rooted at `dir`, generating `world` with `seed`.
pub fn world_pipeline(dir: &Path, world: WorldConfig, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig { seed, strict: true, synth: world, ..PipelineConfig::default() };
    cfg.predict.models = vec!["mock".into(), "rf".into(), "gbt".into(), "majority".into()];
    cfg.resolve_paths(dir);
    cfg
}

pub fn run_through(cfg: &PipelineConfig, last: Stage) {
    run_stage(Stage::Synth, cfg).unwrap();
    for stage in Stage::CHAIN {
        run_stage(stage, cfg).unwrap_or_else(|e| panic!("{stage}: {e}"));
        if stage == last {
            break;
        }
    }
}
