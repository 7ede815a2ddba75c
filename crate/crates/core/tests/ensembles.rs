use metro_choice::choice::{ChoiceLabel, ChoiceRecord};
use metro_choice::predictor::trees::{fit_tree, Criterion, Encoder, TreeParams};
use metro_choice::predictor::{
    fit_tree_ensemble, predict_with_model, EnsembleParams, ForestParams, GbtParams, MajorityClassifier,
};
use metro_choice::synth::{choice_records, BehaviorParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gini(ys: &[f64]) -> f64 {
    if ys.is_empty() {
        return 0.0;
    }
    let p = ys.iter().sum::<f64>() / ys.len() as f64;
    2.0 * p * (1.0 - p)
}

/// Exhaustive search over every cut between sorted distinct values.
fn best_split(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let mut vals = xs.to_vec();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    let n = xs.len() as f64;
    let parent = gini(ys);
    let mut best: Option<(f64, f64)> = None;
    for w in vals.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let left: Vec<f64> = xs.iter().zip(ys).filter(|(x, _)| **x <= t).map(|(_, y)| *y).collect();
        let right: Vec<f64> = xs.iter().zip(ys).filter(|(x, _)| **x > t).map(|(_, y)| *y).collect();
        let gain = parent - (left.len() as f64 / n) * gini(&left) - (right.len() as f64 / n) * gini(&right);
        if gain > 1e-12 && best.is_none_or(|(g, _)| gain > g + 1e-12) {
            best = Some((gain, t));
        }
    }
    best.map(|(_, t)| t)
}

fn stump(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let x: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
    let idx: Vec<usize> = (0..xs.len()).collect();
    let params = TreeParams { max_depth: 1, min_samples_leaf: 1, max_features: None };
    fit_tree(&x, ys, None, &idx, Criterion::Gini, params, None).root_split().map(|(_, t)| t)
}

#[test]
fn four_point_fixtures_match_exhaustive_gini() {
    let fixtures: [([f64; 4], [f64; 4]); 5] = [
        ([1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 1.0, 1.0]),
        ([1.0, 2.0, 3.0, 4.0], [0.0, 1.0, 1.0, 1.0]),
        ([4.0, 1.0, 3.0, 2.0], [1.0, 0.0, 0.0, 1.0]),
        ([0.5, 0.5, 2.0, 9.0], [1.0, 0.0, 1.0, 1.0]),
        ([1.0, 2.0, 3.0, 4.0], [1.0, 0.0, 0.0, 1.0]),
    ];
    for (xs, ys) in fixtures {
        assert_eq!(stump(&xs, &ys), best_split(&xs, &ys), "x={xs:?} y={ys:?}");
    }
}

proptest! {
    #[test]
    fn random_four_point_stumps_match_oracle(
        xs in prop::array::uniform4(0u8..6),
        ys in prop::array::uniform4(0u8..2),
    ) {
        let xs: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let ys: Vec<f64> = ys.iter().map(|&v| v as f64).collect();
        prop_assert_eq!(stump(&xs, &ys), best_split(&xs, &ys));
    }
}

fn sample(n: usize, seed: u64) -> Vec<ChoiceRecord> {
    choice_records(n, &BehaviorParams::default(), seed)
}

#[test]
fn single_unbagged_tree_forest_equals_a_tree() {
    let train = sample(50, 1);
    let params = ForestParams { n_trees: 1, max_depth: 6, min_samples_leaf: 1, bootstrap: false, max_features: None };
    let forest = fit_tree_ensemble(&train, &EnsembleParams::RandomForest(params), 9).unwrap();

    let enc = Encoder::fit(&train);
    let x: Vec<Vec<f64>> = train.iter().map(|r| enc.encode(r)).collect();
    let y: Vec<f64> = train.iter().map(|r| if r.label == Some(ChoiceLabel::Abandon) { 1.0 } else { 0.0 }).collect();
    let idx: Vec<usize> = (0..train.len()).collect();
    let tree = fit_tree(&x, &y, None, &idx, Criterion::Gini, TreeParams { max_depth: 6, ..TreeParams::default() }, None);

    let mut probe = sample(50, 2);
    probe.extend(train.iter().cloned());
    for r in &probe {
        let want = if tree.predict(&enc.encode(r)) > 0.5 { ChoiceLabel::Abandon } else { ChoiceLabel::Wait };
        assert_eq!(forest.predict_one(r), want, "{r:?}");
    }
}

#[test]
fn retraining_with_a_fixed_seed_is_bit_stable() {
    let train = sample(300, 3);
    for params in [EnsembleParams::RandomForest(ForestParams { n_trees: 20, ..Default::default() }), EnsembleParams::GradientBoosted(GbtParams { n_rounds: 20, ..Default::default() })] {
        let a = fit_tree_ensemble(&train, &params, 11).unwrap();
        let b = fit_tree_ensemble(&train, &params, 11).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(predict_with_model(&a, &train), predict_with_model(&b, &train));
    }
    let rf = |seed| fit_tree_ensemble(&train, &EnsembleParams::RandomForest(ForestParams { n_trees: 5, ..Default::default() }), seed).unwrap();
    assert_ne!(rf(1).trees, rf(2).trees);
}

#[test]
fn separable_set_is_fit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train: Vec<ChoiceRecord> = sample(120, 5)
        .into_iter()
        .map(|mut r| {
            r.p2 = rng.gen_bool(0.4);
            r.label = Some(if r.p2 { ChoiceLabel::Wait } else { ChoiceLabel::Abandon });
            r
        })
        .collect();
    for params in [EnsembleParams::RandomForest(ForestParams::default()), EnsembleParams::GradientBoosted(GbtParams::default())] {
        let m = fit_tree_ensemble(&train, &params, 0).unwrap();
        let acc = predict_with_model(&m, &train).iter().zip(&train).filter(|(p, r)| p.label == r.label).count();
        assert_eq!(acc, train.len(), "{:?}", m.kind);
    }
}

#[test]
fn single_class_training_gives_a_flagged_constant_model() {
    let train: Vec<ChoiceRecord> = sample(40, 6).into_iter().map(|mut r| {
        r.label = Some(ChoiceLabel::Wait);
        r
    }).collect();
    let m = fit_tree_ensemble(&train, &EnsembleParams::GradientBoosted(GbtParams::default()), 0).unwrap();
    assert_eq!(m.degenerate, Some(ChoiceLabel::Wait));
    assert!(predict_with_model(&m, &sample(30, 7)).iter().all(|p| p.label == Some(ChoiceLabel::Wait)));
    assert_eq!(MajorityClassifier::fit(&train).class, ChoiceLabel::Wait);
}

#[test]
fn feature_vectors_never_carry_the_label() {
    let recs = sample(20, 8);
    let enc = Encoder::fit(&recs);
    for r in &recs {
        let flipped = ChoiceRecord { label: r.label.map(|l| if l == ChoiceLabel::Wait { ChoiceLabel::Abandon } else { ChoiceLabel::Wait }), ..r.clone() };
        assert_eq!(enc.encode(r), enc.encode(&flipped));
    }
    assert!(enc.feature_names().iter().all(|n| !n.contains("label")));
}
