mod common;

use chrono::{NaiveDate, NaiveTime};
use metro_choice::delay::{DelayEvent, DelayType};
use metro_choice::impact::{is_affected, ImpactParams};
use metro_choice::network::{Direction, Network};
use metro_choice::patterns::TravelPattern;
use metro_choice::synth::toy_network;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hm(m: u32) -> NaiveTime {
    NaiveTime::from_hms_opt(m / 60, m % 60, 0).unwrap()
}

fn random_event(net: &Network, rng: &mut ChaCha8Rng) -> DelayEvent {
    let line = net.lines().choose(rng).unwrap();
    let n = line.stations.len();
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n);
    while b == a {
        b = rng.gen_range(0..n);
    }
    let direction = if rng.gen_bool(0.5) { Direction::Up } else { Direction::Down };
    let (lo, hi) = (a.min(b), a.max(b));
    let (from, to) = if direction == Direction::Up { (lo, hi) } else { (hi, lo) };
    let start = rng.gen_range(420..560);
    DelayEvent {
        event_id: 1,
        line: line.id.clone(),
        delay_type: DelayType::SignalingFault,
        date: NaiveDate::from_ymd_opt(2019, 9, 3).unwrap(),
        start: hm(start),
        end: hm(start + rng.gen_range(10..60)),
        from_station: net.station_name(line.stations[from]).into(),
        to_station: net.station_name(line.stations[to]).into(),
        direction,
    }
}

#[test]
fn hundred_random_pairs_match_brute_force() {
    let net = toy_network().build().unwrap();
    let names: Vec<String> = net.vocabulary().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let params = ImpactParams::default();
    let (mut hits, mut misses) = (0, 0);
    for i in 0..100 {
        let e = random_event(&net, &mut rng);
        let od: Vec<&String> = names.choose_multiple(&mut rng, 2).collect();
        let p = TravelPattern {
            card_id: format!("c{i}"),
            origin: od[0].clone(),
            dest: od[1].clone(),
            entry_mean: rng.gen_range(400.0..580.0),
            entry_std: rng.gen_range(0.0..15.0),
            mean_duration: 30.0,
            trip_count: 20,
            day_count: 20,
        };
        let got = is_affected(&p, &e, &net, params).map(|a| a.overlap_stations);
        let want = common::overlap_oracle(&net, &p, &e, params.window_pad_minutes);
        assert_eq!(got, want, "pattern {p:?} event {e:?}");
        if want.is_some() {
            hits += 1;
        } else {
            misses += 1;
        }
    }
    assert!(hits >= 5 && misses >= 5, "degenerate sample: {hits} hits, {misses} misses");
}

#[test]
fn enlarging_the_window_never_unaffects() {
    let net = toy_network().build().unwrap();
    let names: Vec<String> = net.vocabulary().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let e = random_event(&net, &mut rng);
        let od: Vec<&String> = names.choose_multiple(&mut rng, 2).collect();
        let p = TravelPattern {
            card_id: "c".into(),
            origin: od[0].clone(),
            dest: od[1].clone(),
            entry_mean: rng.gen_range(400.0..580.0),
            entry_std: 5.0,
            mean_duration: 30.0,
            trip_count: 20,
            day_count: 20,
        };
        let wider = DelayEvent { start: hm(400), end: hm(700), ..e.clone() };
        if is_affected(&p, &e, &net, ImpactParams::default()).is_some() {
            assert!(is_affected(&p, &wider, &net, ImpactParams::default()).is_some());
        }
    }
}
