mod common;

use std::collections::{BTreeMap, BTreeSet};

use metro_choice::afc::{parse_afc, reconstruct_trips, Calendar, ParseOptions, ReconstructParams};
use metro_choice::choice::ChoiceLabel;
use metro_choice::delay::{extract_from_log, parse_structured_delays, split_narratives, ExtractBackend};
use metro_choice::patterns::screen_regulars;
use metro_choice::synth::{files, generate_world, read_truth_labels, WorldConfig};

fn small(seed: u64) -> WorldConfig {
    WorldConfig { seed, regulars: 300, casual_high: 100, casual_low: 100, ..WorldConfig::default() }
}

#[test]
fn fixed_seed_gives_identical_files() {
    let a = generate_world(&small(3)).unwrap().render_files().unwrap();
    let b = generate_world(&small(3)).unwrap().render_files().unwrap();
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs");
    }
    let dir = tempfile::tempdir().unwrap();
    generate_world(&small(3)).unwrap().write_to(dir.path()).unwrap();
    for (name, bytes) in &a {
        assert_eq!(&std::fs::read(dir.path().join(name)).unwrap(), bytes, "{name}");
    }
}

#[test]
fn emitted_files_reparse_without_rejects() {
    let w = generate_world(&small(4)).unwrap();
    let files = w.render_files().unwrap();
    let cal = Calendar::read(files[files::CALENDAR].as_slice()).unwrap();
    let (records, report) = parse_afc(files[files::AFC].as_slice(), Some(&cal), &ParseOptions::default()).unwrap();
    assert_eq!(report.rejected_count(), 0);
    assert_eq!(records, w.records);
    let (_, anomalies) = reconstruct_trips(&records, ReconstructParams::default());
    assert!(anomalies.is_empty(), "{anomalies:?}");

    let (events, rejects) = parse_structured_delays(files[files::DELAYS].as_slice(), Some(&w.network)).unwrap();
    assert!(rejects.is_empty(), "{rejects:?}");
    assert_eq!(events, w.events);

    let text = String::from_utf8(files[files::NARRATIVES].clone()).unwrap();
    let blocks = split_narratives(&text);
    assert_eq!(blocks.len(), w.events.len());
    for (block, e) in blocks.iter().zip(&w.events) {
        let got = extract_from_log(block, &w.network, &ExtractBackend::Rule, e.event_id).unwrap();
        assert_eq!(&got.event, e);
    }
}

#[test]
fn screened_set_equals_planted_set() {
    let w = generate_world(&small(5)).unwrap();
    let (trips, _) = reconstruct_trips(&w.records, ReconstructParams::default());
    let days: BTreeSet<_> = w.events.iter().map(|e| e.date).collect();
    let normal: Vec<_> = trips.into_iter().filter(|t| !days.contains(&t.date())).collect();
    let screened: BTreeSet<String> =
        screen_regulars(&normal, WorldConfig::default().screen).into_iter().map(|c| c.card_id).collect();
    let planted: BTreeSet<String> = w.truth.regulars.iter().cloned().collect();
    assert_eq!(screened, planted);
}

#[test]
fn truth_is_consistent_with_the_afc_stream() {
    let w = generate_world(&small(6)).unwrap();
    let (trips, _) = reconstruct_trips(&w.records, ReconstructParams::default());
    let events: BTreeMap<u32, _> = w.events.iter().map(|e| (e.event_id, e)).collect();
    let affected: BTreeMap<(String, u32), _> =
        w.truth.affected.iter().map(|a| ((a.card_id.clone(), a.event_id), a)).collect();
    assert_eq!(affected.len(), w.truth.labels.len());
    for l in &w.truth.labels {
        let a = affected[&(l.card_id.clone(), l.event_id)];
        let date = events[&l.event_id].date;
        let rode = trips.iter().any(|t| t.card_id == l.card_id && t.date() == date && t.origin == a.origin && t.dest == a.dest);
        assert_eq!(rode, l.label == ChoiceLabel::Wait, "{l:?}");
    }
    let bytes = w.render_files().unwrap();
    assert_eq!(read_truth_labels(bytes[files::TRUTH_LABELS].as_slice()).unwrap(), w.truth.labels);
}

#[test]
fn zero_events_still_emits_afc() {
    let w = generate_world(&WorldConfig { random_events: 0, ..small(7) }).unwrap();
    let files = w.render_files().unwrap();
    assert!(w.truth.labels.is_empty());
    assert!(files[files::TRUTH_AFFECTED].is_empty());
    assert!(files[files::AFC].len() > 1000);
}

#[test]
fn realized_abandon_rate_matches_target() {
    let cfg = WorldConfig { seed: 8, regulars: 2400, casual_high: 0, casual_low: 0, random_events: 16, ..WorldConfig::default() };
    let w = generate_world(&cfg).unwrap();
    let n = w.truth.labels.len();
    assert!(n >= 2000, "only {n} affected instances");
    let k = w.truth.labels.iter().filter(|l| l.label == ChoiceLabel::Abandon).count();
    let rate = k as f64 / n as f64;
    assert!((rate - 0.19).abs() <= 0.03, "{k}/{n} = {rate}");
}
