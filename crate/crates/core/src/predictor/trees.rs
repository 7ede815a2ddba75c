//! CART trees, a bagged random forest, and gradient-boosted trees on
//! logistic loss. Categorical features are one-hot encoded from the
//! categories seen in training.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Prediction;
use crate::choice::{ChoiceLabel, ChoiceRecord, DelayPeriod};
use crate::delay::DelayType;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrainError {
    #[error("training set is empty")]
    Empty,
    #[error("training record for card {card_id} event {event_id} has no label")]
    Unlabeled { card_id: String, event_id: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub delay_types: Vec<DelayType>,
    pub periods: Vec<DelayPeriod>,
}

impl Encoder {
    pub fn fit(records: &[ChoiceRecord]) -> Encoder {
        let types: BTreeSet<DelayType> = records.iter().map(|r| r.v1).collect();
        let periods: BTreeSet<DelayPeriod> = records.iter().map(|r| r.v2).collect();
        Encoder { delay_types: types.into_iter().collect(), periods: periods.into_iter().collect() }
    }

    pub fn width(&self) -> usize {
        self.delay_types.len() + self.periods.len() + 3
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.delay_types.iter().map(|t| format!("v1={t}")).collect();
        names.extend(self.periods.iter().map(|p| format!("v2={p}")));
        names.extend(["p1", "p2", "p3"].map(String::from));
        names
    }

    /// Unseen categories encode as all zeros.
    pub fn encode(&self, r: &ChoiceRecord) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.width());
        if !self.delay_types.contains(&r.v1) || !self.periods.contains(&r.v2) {
            log::debug!("card {} event {}: category unseen in training", r.card_id, r.event_id);
        }
        x.extend(self.delay_types.iter().map(|&t| if t == r.v1 { 1.0 } else { 0.0 }));
        x.extend(self.periods.iter().map(|&p| if p == r.v2 { 1.0 } else { 0.0 }));
        x.push(r.p1);
        x.push(if r.p2 { 1.0 } else { 0.0 });
        x.push(r.p3);
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64 },
    /// `x[feature] <= threshold` goes left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// A binary tree stored flat; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes.first()? {
            Node::Split { feature, threshold, .. } => Some((*feature, *threshold)),
            Node::Leaf { .. } => None,
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    /// Binary targets in {0, 1}; leaves hold the positive fraction.
    Gini,
    /// Real targets; leaves hold `sum(target) / sum(hessian)`.
    Newton,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features considered per split; `None` means all.
    pub max_features: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams { max_depth: 6, min_samples_leaf: 1, max_features: None }
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    target: &'a [f64],
    hess: Option<&'a [f64]>,
    criterion: Criterion,
    params: TreeParams,
    nodes: Vec<Node>,
}

/// Impurity mass of a node from its count, target sum and target square sum:
/// Gini `n * 2p(1-p)`, or squared error `ss - s^2/n`.
fn impurity(criterion: Criterion, n: f64, s: f64, ss: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    match criterion {
        Criterion::Gini => {
            let p = s / n;
            n * 2.0 * p * (1.0 - p)
        }
        Criterion::Newton => ss - s * s / n,
    }
}

impl Builder<'_> {
    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let s: f64 = idx.iter().map(|&i| self.target[i]).sum();
        match (self.criterion, self.hess) {
            (Criterion::Gini, _) => s / idx.len() as f64,
            (Criterion::Newton, Some(h)) => {
                let hs: f64 = idx.iter().map(|&i| h[i]).sum();
                s / hs.max(1e-12)
            }
            (Criterion::Newton, None) => s / idx.len() as f64,
        }
    }

    fn best_split(&self, idx: &[usize], rng: &mut Option<&mut ChaCha8Rng>) -> Option<(usize, f64, f64)> {
        let width = self.x[idx[0]].len();
        let features: Vec<usize> = match (self.params.max_features, rng.as_deref_mut()) {
            (Some(k), Some(r)) if k < width => {
                let mut f = sample(r, width, k).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..width).collect(),
        };
        let n = idx.len() as f64;
        let (s_all, ss_all) = idx.iter().fold((0.0, 0.0), |(s, ss), &i| (s + self.target[i], ss + self.target[i] * self.target[i]));
        let parent = impurity(self.criterion, n, s_all, ss_all);
        let min_leaf = self.params.min_samples_leaf.max(1);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut order: Vec<usize> = idx.to_vec();
        for f in features {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let (mut s, mut ss) = (0.0, 0.0);
            for k in 0..order.len() - 1 {
                let t = self.target[order[k]];
                s += t;
                ss += t * t;
                let (lo, hi) = (self.x[order[k]][f], self.x[order[k + 1]][f]);
                let nl = k + 1;
                if lo == hi || nl < min_leaf || order.len() - nl < min_leaf {
                    continue;
                }
                let child = impurity(self.criterion, nl as f64, s, ss)
                    + impurity(self.criterion, n - nl as f64, s_all - s, ss_all - ss);
                let gain = parent - child;
                if gain > 1e-12 && best.is_none_or(|b| gain > b.2 + 1e-12) {
                    best = Some((f, (lo + hi) / 2.0, gain));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut Option<&mut ChaCha8Rng>) -> usize {
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { value: self.leaf_value(idx) });
        if depth >= self.params.max_depth || idx.len() < 2 * self.params.min_samples_leaf.max(1) {
            return me;
        }
        let Some((feature, threshold, _)) = self.best_split(idx, rng) else {
            return me;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(&l, depth + 1, rng);
        let right = self.grow(&r, depth + 1, rng);
        self.nodes[me] = Node::Split { feature, threshold, left, right };
        me
    }
}

/// Fits one tree on the rows listed in `idx`. Splits are chosen by maximum
/// impurity decrease over midpoints between adjacent distinct values; ties
/// keep the lowest feature index and threshold.
pub fn fit_tree(
    x: &[Vec<f64>],
    target: &[f64],
    hess: Option<&[f64]>,
    idx: &[usize],
    criterion: Criterion,
    params: TreeParams,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Tree {
    assert!(!idx.is_empty(), "cannot fit a tree on zero rows");
    let mut b = Builder { x, target, hess, criterion, params, nodes: Vec::new() };
    b.grow(idx, 0, &mut rng);
    Tree { nodes: b.nodes }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    RandomForest,
    GradientBoosted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub bootstrap: bool,
    pub max_features: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 100, max_depth: 6, min_samples_leaf: 1, bootstrap: true, max_features: Some(3) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_rounds: usize,
    /// Capped at 3.
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams { n_rounds: 100, max_depth: 3, learning_rate: 0.1, min_samples_leaf: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnsembleParams {
    RandomForest(ForestParams),
    GradientBoosted(GbtParams),
}

impl EnsembleParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            EnsembleParams::RandomForest(_) => ModelKind::RandomForest,
            EnsembleParams::GradientBoosted(_) => ModelKind::GradientBoosted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsembleModel {
    pub kind: ModelKind,
    pub encoder: Encoder,
    pub trees: Vec<Tree>,
    /// Initial log-odds for boosting; unused by forests.
    pub base_score: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Set when training saw a single class; the model then always
    /// predicts that class.
    pub degenerate: Option<ChoiceLabel>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn fit_tree_ensemble(
    train: &[ChoiceRecord],
    params: &EnsembleParams,
    seed: u64,
) -> Result<TreeEnsembleModel, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut y = Vec::with_capacity(train.len());
    for r in train {
        let label = r.label.ok_or_else(|| TrainError::Unlabeled { card_id: r.card_id.clone(), event_id: r.event_id })?;
        y.push(if label.is_positive() { 1.0 } else { 0.0 });
    }
    let encoder = Encoder::fit(train);
    let x: Vec<Vec<f64>> = train.iter().map(|r| encoder.encode(r)).collect();
    let kind = params.kind();
    let positives = y.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 || positives == y.len() {
        let class = if positives == 0 { ChoiceLabel::Wait } else { ChoiceLabel::Abandon };
        log::warn!("training set has only {class} labels; model is constant");
        return Ok(TreeEnsembleModel {
            kind,
            encoder,
            trees: Vec::new(),
            base_score: 0.0,
            learning_rate: 0.0,
            seed,
            degenerate: Some(class),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..y.len()).collect();
    let model = match *params {
        EnsembleParams::RandomForest(p) => {
            let tp = TreeParams { max_depth: p.max_depth, min_samples_leaf: p.min_samples_leaf, max_features: p.max_features };
            let trees = (0..p.n_trees.max(1))
                .map(|_| {
                    let idx: Vec<usize> = if p.bootstrap {
                        (0..y.len()).map(|_| rng.gen_range(0..y.len())).collect()
                    } else {
                        all.clone()
                    };
                    fit_tree(&x, &y, None, &idx, Criterion::Gini, tp, Some(&mut rng))
                })
                .collect();
            TreeEnsembleModel { kind, encoder, trees, base_score: 0.0, learning_rate: 0.0, seed, degenerate: None }
        }
        EnsembleParams::GradientBoosted(p) => {
            let tp = TreeParams { max_depth: p.max_depth.clamp(1, 3), min_samples_leaf: p.min_samples_leaf, max_features: None };
            let prior = positives as f64 / y.len() as f64;
            let base = (prior / (1.0 - prior)).ln();
            let mut score = vec![base; y.len()];
            let mut trees = Vec::with_capacity(p.n_rounds);
            for _ in 0..p.n_rounds {
                let prob: Vec<f64> = score.iter().map(|&z| sigmoid(z)).collect();
                let resid: Vec<f64> = y.iter().zip(&prob).map(|(t, q)| t - q).collect();
                let hess: Vec<f64> = prob.iter().map(|q| q * (1.0 - q)).collect();
                let tree = fit_tree(&x, &resid, Some(&hess), &all, Criterion::Newton, tp, None);
                for (s, row) in score.iter_mut().zip(&x) {
                    *s += p.learning_rate * tree.predict(row);
                }
                trees.push(tree);
            }
            TreeEnsembleModel { kind, encoder, trees, base_score: base, learning_rate: p.learning_rate, seed, degenerate: None }
        }
    };
    Ok(model)
}

impl TreeEnsembleModel {
    pub fn backend_id(&self) -> &'static str {
        match self.kind {
            ModelKind::RandomForest => "rf",
            ModelKind::GradientBoosted => "gbt",
        }
    }

    pub fn predict_one(&self, r: &ChoiceRecord) -> ChoiceLabel {
        if let Some(class) = self.degenerate {
            return class;
        }
        let x = self.encoder.encode(r);
        let abandon = match self.kind {
            ModelKind::RandomForest => {
                let votes = self.trees.iter().filter(|t| t.predict(&x) > 0.5).count();
                2 * votes > self.trees.len()
            }
            ModelKind::GradientBoosted => {
                let z = self.base_score + self.trees.iter().map(|t| self.learning_rate * t.predict(&x)).sum::<f64>();
                z > 0.0
            }
        };
        if abandon {
            ChoiceLabel::Abandon
        } else {
            ChoiceLabel::Wait
        }
    }
}

pub fn predict_with_model(model: &TreeEnsembleModel, records: &[ChoiceRecord]) -> Vec<Prediction> {
    records
        .iter()
        .map(|r| Prediction {
            card_id: r.card_id.clone(),
            event_id: r.event_id,
            label: Some(model.predict_one(r)),
            backend: model.backend_id().to_string(),
            rationale: String::new(),
            retry_count: 0,
        })
        .collect()
}

/// Always predicts the most frequent training class; ties go to Wait.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MajorityClassifier {
    pub class: ChoiceLabel,
}

impl MajorityClassifier {
    pub fn fit(train: &[ChoiceRecord]) -> MajorityClassifier {
        let abandon = train.iter().filter(|r| r.label == Some(ChoiceLabel::Abandon)).count();
        let wait = train.iter().filter(|r| r.label == Some(ChoiceLabel::Wait)).count();
        MajorityClassifier { class: if abandon > wait { ChoiceLabel::Abandon } else { ChoiceLabel::Wait } }
    }

    pub fn predict(&self, records: &[ChoiceRecord]) -> Vec<Prediction> {
        records
            .iter()
            .map(|r| Prediction {
                card_id: r.card_id.clone(),
                event_id: r.event_id,
                label: Some(self.class),
                backend: "majority".into(),
                rationale: String::new(),
                retry_count: 0,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, p2: bool, p3: f64, label: ChoiceLabel) -> ChoiceRecord {
        ChoiceRecord {
            card_id: format!("c{i}"),
            event_id: 1,
            v1: if i.is_multiple_of(3) { DelayType::SignalingFault } else { DelayType::Others },
            v2: if i.is_multiple_of(2) { DelayPeriod::MorningPeak } else { DelayPeriod::OffPeak },
            p1: 20.0 + (i % 7) as f64,
            p2,
            p3,
            label: Some(label),
        }
    }

    fn separable() -> Vec<ChoiceRecord> {
        (0..40)
            .map(|i| {
                let p2 = i % 4 != 0;
                rec(i, p2, (i % 11) as f64, if p2 { ChoiceLabel::Wait } else { ChoiceLabel::Abandon })
            })
            .collect()
    }

    fn accuracy(model: &TreeEnsembleModel, data: &[ChoiceRecord]) -> f64 {
        let hits = data.iter().filter(|r| Some(model.predict_one(r)) == r.label).count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn separable_training_accuracy() {
        let data = separable();
        for p in [EnsembleParams::RandomForest(ForestParams::default()), EnsembleParams::GradientBoosted(GbtParams::default())] {
            let m = fit_tree_ensemble(&data, &p, 7).unwrap();
            assert_eq!(accuracy(&m, &data), 1.0, "{:?}", m.kind);
            assert!(m.degenerate.is_none());
        }
    }

    #[test]
    fn single_class_is_degenerate() {
        let data: Vec<_> = (0..10).map(|i| rec(i, true, 3.0, ChoiceLabel::Wait)).collect();
        let m = fit_tree_ensemble(&data, &EnsembleParams::GradientBoosted(GbtParams::default()), 1).unwrap();
        assert_eq!(m.degenerate, Some(ChoiceLabel::Wait));
        let probe = rec(99, false, 0.0, ChoiceLabel::Abandon);
        assert!(predict_with_model(&m, &[probe]).iter().all(|p| p.label == Some(ChoiceLabel::Wait)));
    }

    #[test]
    fn rejects_bad_training_sets() {
        assert_eq!(fit_tree_ensemble(&[], &EnsembleParams::RandomForest(ForestParams::default()), 0), Err(TrainError::Empty));
        let mut r = rec(0, true, 1.0, ChoiceLabel::Wait);
        r.label = None;
        assert!(matches!(
            fit_tree_ensemble(&[r], &EnsembleParams::RandomForest(ForestParams::default()), 0),
            Err(TrainError::Unlabeled { .. })
        ));
    }

    #[test]
    fn unseen_category_encodes_zero() {
        let enc = Encoder { delay_types: vec![DelayType::Others], periods: vec![DelayPeriod::MorningPeak] };
        let mut r = rec(1, true, 2.0, ChoiceLabel::Wait);
        r.v1 = DelayType::PowerFault;
        r.v2 = DelayPeriod::EveningPeak;
        assert_eq!(enc.encode(&r), vec![0.0, 0.0, r.p1, 1.0, 2.0]);
        assert_eq!(enc.feature_names().len(), enc.width());
    }

    #[test]
    fn gbt_depth_capped() {
        let p = GbtParams { max_depth: 8, n_rounds: 5, ..Default::default() };
        let m = fit_tree_ensemble(&separable(), &EnsembleParams::GradientBoosted(p), 0).unwrap();
        assert!(m.trees.iter().all(|t| t.depth() <= 3));
    }

    #[test]
    fn majority() {
        let mut data = separable();
        let m = MajorityClassifier::fit(&data);
        assert_eq!(m.class, ChoiceLabel::Wait);
        data.iter_mut().for_each(|r| r.label = Some(ChoiceLabel::Abandon));
        assert_eq!(MajorityClassifier::fit(&data).class, ChoiceLabel::Abandon);
    }

    #[test]
    fn model_json_round_trip() {
        let m = fit_tree_ensemble(&separable(), &EnsembleParams::RandomForest(ForestParams { n_trees: 3, ..Default::default() }), 3).unwrap();
        let back: TreeEnsembleModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
