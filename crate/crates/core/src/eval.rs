//! Confusion-matrix metrics with Abandon as the positive class, model
//! comparison tables, and train/test splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::{ChoiceLabel, ChoiceRecord, RecordKey};
use crate::predictor::Prediction;

/// Allowed gap between a printed F1 and the harmonic mean of the printed
/// precision and recall.
pub const PRINTED_F1_TOLERANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn add(&mut self, predicted: ChoiceLabel, actual: ChoiceLabel) {
        match (predicted.is_positive(), actual.is_positive()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn from_pairs<I: IntoIterator<Item = (ChoiceLabel, ChoiceLabel)>>(pairs: I) -> Self {
        let mut m = ConfusionMatrix::default();
        for (p, a) in pairs {
            m.add(p, a);
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same matrix with Wait as the positive class.
    pub fn swapped(&self) -> ConfusionMatrix {
        ConfusionMatrix { tp: self.tn, fp: self.fn_, tn: self.tp, fn_: self.fp }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricFlags {
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
    /// The 2-decimal F1 disagrees with the harmonic mean of the 2-decimal
    /// precision and recall by more than the tolerance.
    pub inconsistent: bool,
}

impl MetricFlags {
    pub fn any(&self) -> bool {
        self.precision_undefined || self.recall_undefined || self.f1_undefined || self.inconsistent
    }

    fn describe(&self) -> String {
        let mut v = Vec::new();
        if self.precision_undefined {
            v.push("precision-undefined");
        }
        if self.recall_undefined {
            v.push("recall-undefined");
        }
        if self.f1_undefined {
            v.push("f1-undefined");
        }
        if self.inconsistent {
            v.push("inconsistent-f1");
        }
        v.join(",")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub evaluated: u64,
    pub positives: u64,
    pub negatives: u64,
    pub unresolved: u64,
    /// Resolved share of all predictions.
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub support: Support,
    pub flags: MetricFlags,
    pub matrix: Option<ConfusionMatrix>,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction/truth keys differ; predictions without truth: {}; truth without predictions: {}", fmt_keys(.orphan_predictions), fmt_keys(.orphan_truth))]
    KeyMismatch { orphan_predictions: Vec<RecordKey>, orphan_truth: Vec<RecordKey> },
    #[error("duplicate key {}@{}", .0.0, .0.1)]
    DuplicateKey(RecordKey),
    #[error("truth record {}@{} has no label", .0.0, .0.1)]
    UnlabeledTruth(RecordKey),
    #[error("no resolved predictions to evaluate")]
    NothingResolved,
}

fn fmt_keys(keys: &[RecordKey]) -> String {
    if keys.is_empty() {
        return "none".into();
    }
    keys.iter().map(|(c, e)| format!("{c}@{e}")).collect::<Vec<_>>().join(", ")
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn harmonic_mean(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// True when the printed F1 matches the harmonic mean of the printed
/// precision and recall within `tol`.
pub fn printed_f1_consistent(precision: f64, recall: f64, f1: f64, tol: f64) -> bool {
    (harmonic_mean(precision, recall) - f1).abs() <= tol + 1e-9
}

impl MetricsReport {
    pub fn from_matrix(model: &str, m: ConfusionMatrix, unresolved: u64) -> MetricsReport {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let total = m.total();
        let precision_undefined = m.tp + m.fp == 0;
        let recall_undefined = m.tp + m.fn_ == 0;
        let precision = ratio(m.tp, m.tp + m.fp);
        let recall = ratio(m.tp, m.tp + m.fn_);
        let f1_undefined = precision + recall == 0.0;
        let f1 = harmonic_mean(precision, recall);
        let inconsistent = !printed_f1_consistent(round2(precision), round2(recall), round2(f1), PRINTED_F1_TOLERANCE);
        MetricsReport {
            model: model.to_string(),
            accuracy: ratio(m.tp + m.tn, total),
            recall,
            precision,
            f1,
            support: Support {
                evaluated: total,
                positives: m.tp + m.fn_,
                negatives: m.tn + m.fp,
                unresolved,
                coverage: ratio(total, total + unresolved),
            },
            flags: MetricFlags { precision_undefined, recall_undefined, f1_undefined, inconsistent },
            matrix: Some(m),
        }
    }

    /// A report from already-published figures. Only the consistency flag
    /// can be derived; there is no matrix.
    pub fn from_printed(model: &str, accuracy: f64, recall: f64, precision: f64, f1: f64) -> MetricsReport {
        MetricsReport {
            model: model.to_string(),
            accuracy,
            recall,
            precision,
            f1,
            support: Support::default(),
            flags: MetricFlags {
                inconsistent: !printed_f1_consistent(precision, recall, f1, PRINTED_F1_TOLERANCE),
                ..Default::default()
            },
            matrix: None,
        }
    }

    /// Recomputed F1 from this report's own precision and recall.
    pub fn recomputed_f1(&self) -> f64 {
        harmonic_mean(self.precision, self.recall)
    }
}

/// Scores predictions against labelled truth. Unresolved predictions are
/// left out of the matrix and counted separately.
pub fn compute_metrics(model: &str, predictions: &[Prediction], truth: &[ChoiceRecord]) -> Result<MetricsReport, EvalError> {
    let mut truth_by_key: HashMap<RecordKey, ChoiceLabel> = HashMap::with_capacity(truth.len());
    for r in truth {
        let label = r.label.ok_or_else(|| EvalError::UnlabeledTruth(r.key()))?;
        if truth_by_key.insert(r.key(), label).is_some() {
            return Err(EvalError::DuplicateKey(r.key()));
        }
    }
    let mut seen: BTreeSet<RecordKey> = BTreeSet::new();
    let mut orphan_predictions = Vec::new();
    for p in predictions {
        if !seen.insert(p.key()) {
            return Err(EvalError::DuplicateKey(p.key()));
        }
        if !truth_by_key.contains_key(&p.key()) {
            orphan_predictions.push(p.key());
        }
    }
    let mut orphan_truth: Vec<RecordKey> = truth_by_key.keys().filter(|k| !seen.contains(*k)).cloned().collect();
    if !orphan_predictions.is_empty() || !orphan_truth.is_empty() {
        orphan_predictions.sort();
        orphan_truth.sort();
        return Err(EvalError::KeyMismatch { orphan_predictions, orphan_truth });
    }
    let mut m = ConfusionMatrix::default();
    let mut unresolved = 0;
    for p in predictions {
        match p.label {
            Some(label) => m.add(label, truth_by_key[&p.key()]),
            None => unresolved += 1,
        }
    }
    if m.total() == 0 {
        return Err(EvalError::NothingResolved);
    }
    Ok(MetricsReport::from_matrix(model, m, unresolved))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<MetricsReport>,
    pub warnings: Vec<String>,
}

pub const COMPARISON_COLUMNS: [&str; 5] = ["Model", "Accuracy", "Recall", "Precision", "F1-score"];

/// Stacks reports into one table. Repeated model ids get `#2`, `#3`, ...
/// suffixes.
pub fn compare_models(reports: &[MetricsReport]) -> Comparison {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    let rows = reports
        .iter()
        .map(|r| {
            let n = counts.entry(r.model.clone()).or_insert(0);
            *n += 1;
            let mut row = r.clone();
            if *n > 1 {
                row.model = format!("{}#{n}", r.model);
                let w = format!("duplicate model id {:?} renamed to {:?}", r.model, row.model);
                log::warn!("{w}");
                warnings.push(w);
            }
            row
        })
        .collect();
    Comparison { rows, warnings }
}

impl Comparison {
    pub fn render_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).chain([COMPARISON_COLUMNS[0].len()]).max().unwrap_or(5);
        let mut s = format!(
            "{:<width$}  {:>8}  {:>6}  {:>9}  {:>8}  flags\n",
            COMPARISON_COLUMNS[0], COMPARISON_COLUMNS[1], COMPARISON_COLUMNS[2], COMPARISON_COLUMNS[3], COMPARISON_COLUMNS[4]
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<width$}  {:>8.2}  {:>6.2}  {:>9.2}  {:>8.2}  {}\n",
                r.model,
                r.accuracy,
                r.recall,
                r.precision,
                r.f1,
                r.flags.describe()
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn any_inconsistent(&self) -> bool {
        self.rows.iter().any(|r| r.flags.inconsistent)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Stratified,
    LeaveOneEventOut,
}

/// Per-class shuffled split; each class contributes `round(n * fraction)`
/// records to training. Both halves keep input order.
pub fn stratified_split(records: &[ChoiceRecord], train_fraction: f64, seed: u64) -> (Vec<ChoiceRecord>, Vec<ChoiceRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; records.len()];
    let classes = [Some(ChoiceLabel::Wait), Some(ChoiceLabel::Abandon), None];
    for class in classes {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == class).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * train_fraction.clamp(0.0, 1.0)).round() as usize;
        for &i in &idx[..k] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(in_train) {
        if t {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    (train, test)
}

/// One fold per event id: that event's records are the test set.
pub fn leave_one_event_out(records: &[ChoiceRecord]) -> Vec<(u32, Vec<ChoiceRecord>, Vec<ChoiceRecord>)> {
    let ids: BTreeSet<u32> = records.iter().map(|r| r.event_id).collect();
    ids.into_iter()
        .map(|id| {
            let (test, train): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| r.event_id == id);
            (id, train, test)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::DelayPeriod;
    use crate::delay::DelayType;

    fn rec(i: usize, label: ChoiceLabel) -> ChoiceRecord {
        ChoiceRecord {
            card_id: format!("c{i}"),
            event_id: (i % 3) as u32,
            v1: DelayType::Others,
            v2: DelayPeriod::MorningPeak,
            p1: 30.0,
            p2: false,
            p3: 5.0,
            label: Some(label),
        }
    }

    fn pred(r: &ChoiceRecord, label: Option<ChoiceLabel>) -> Prediction {
        Prediction { card_id: r.card_id.clone(), event_id: r.event_id, label, backend: "t".into(), rationale: String::new(), retry_count: 0 }
    }

    #[test]
    fn perfect_predictions() {
        let truth: Vec<_> = (0..10).map(|i| rec(i, if i < 3 { ChoiceLabel::Abandon } else { ChoiceLabel::Wait })).collect();
        let preds: Vec<_> = truth.iter().map(|r| pred(r, r.label)).collect();
        let m = compute_metrics("p", &preds, &truth).unwrap();
        assert_eq!((m.accuracy, m.recall, m.precision, m.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(!m.flags.any());
    }

    #[test]
    fn counts_giving_published_rate_pair() {
        // 86 of 100 positives found, 79 false alarms: precision 86/165 = 0.521.
        let m = ConfusionMatrix { tp: 86, fn_: 14, fp: 79, tn: 21 };
        let r = MetricsReport::from_matrix("x", m, 0);
        assert!((r.precision - 0.52).abs() < 0.005 && (r.recall - 0.86).abs() < 0.005);
        assert!((r.f1 - 0.65).abs() < 0.005);
        assert!((r.f1 - 2.0 * r.precision * r.recall / (r.precision + r.recall)).abs() < 1e-9);
    }

    #[test]
    fn printed_row_checks() {
        assert!(!MetricsReport::from_printed("ok", 0.53, 0.86, 0.52, 0.65).flags.inconsistent);
        let bad = MetricsReport::from_printed("bad", 0.83, 0.50, 0.66, 0.46);
        assert!(bad.flags.inconsistent);
        assert!((bad.recomputed_f1() - 0.569).abs() < 5e-4);
    }

    #[test]
    fn unresolved_excluded_and_undefined_flags() {
        let truth: Vec<_> = (0..4).map(|i| rec(i, ChoiceLabel::Wait)).collect();
        let mut preds: Vec<_> = truth.iter().map(|r| pred(r, Some(ChoiceLabel::Wait))).collect();
        preds[0].label = None;
        let m = compute_metrics("w", &preds, &truth).unwrap();
        assert_eq!(m.support.evaluated, 3);
        assert_eq!(m.support.unresolved, 1);
        assert_eq!(m.support.coverage, 0.75);
        assert!(m.flags.precision_undefined && m.flags.recall_undefined && m.flags.f1_undefined);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn key_mismatch_lists_orphans() {
        let truth: Vec<_> = (0..3).map(|i| rec(i, ChoiceLabel::Wait)).collect();
        let mut preds: Vec<_> = truth[..2].iter().map(|r| pred(r, Some(ChoiceLabel::Wait))).collect();
        preds.push(pred(&rec(9, ChoiceLabel::Wait), Some(ChoiceLabel::Wait)));
        match compute_metrics("m", &preds, &truth) {
            Err(EvalError::KeyMismatch { orphan_predictions, orphan_truth }) => {
                assert_eq!(orphan_predictions, vec![("c9".to_string(), 0)]);
                assert_eq!(orphan_truth, vec![("c2".to_string(), 2)]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_rendering_and_duplicates() {
        let r = MetricsReport::from_printed("GPT-4", 0.53, 0.86, 0.52, 0.65);
        let one = compare_models(std::slice::from_ref(&r));
        let t = one.render_table();
        assert_eq!(t.lines().count(), 2);
        assert!(t.starts_with("Model"));
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(&header[..5], &COMPARISON_COLUMNS);
        assert!(t.contains("0.53") && t.contains("0.86"));
        let two = compare_models(&[r.clone(), r]);
        assert_eq!(two.rows[1].model, "GPT-4#2");
        assert_eq!(two.warnings.len(), 1);
    }

    #[test]
    fn swapped_class_convention() {
        let m = ConfusionMatrix { tp: 5, fp: 3, tn: 20, fn_: 7 };
        let a = MetricsReport::from_matrix("a", m, 0);
        let b = MetricsReport::from_matrix("b", m.swapped(), 0);
        assert_eq!(a.accuracy, b.accuracy);
        // precision for Wait = tn / (tn + fn)
        assert_eq!(b.precision, 20.0 / 27.0);
        assert_eq!(b.recall, 20.0 / 23.0);
    }

    #[test]
    fn splits() {
        let recs: Vec<_> = (0..100).map(|i| rec(i, if i % 5 == 0 { ChoiceLabel::Abandon } else { ChoiceLabel::Wait })).collect();
        let (train, test) = stratified_split(&recs, 0.7, 1);
        assert_eq!(train.len() + test.len(), 100);
        assert_eq!(train.iter().filter(|r| r.label == Some(ChoiceLabel::Abandon)).count(), 14);
        assert_eq!(stratified_split(&recs, 0.7, 1), (train, test));
        let folds = leave_one_event_out(&recs);
        assert_eq!(folds.len(), 3);
        assert!(folds.iter().all(|(id, tr, te)| te.iter().all(|r| r.event_id == *id) && tr.iter().all(|r| r.event_id != *id)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn metrics_identities(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..80), seed in any::<u64>()) {
                let lab = |b: bool| if b { ChoiceLabel::Abandon } else { ChoiceLabel::Wait };
                let truth: Vec<_> = pairs.iter().enumerate().map(|(i, &(_, a))| rec(i, lab(a))).collect();
                let preds: Vec<_> = pairs.iter().zip(&truth).map(|(&(p, _), r)| pred(r, Some(lab(p)))).collect();
                let m = compute_metrics("x", &preds, &truth).unwrap();
                let mx = m.matrix.unwrap();
                prop_assert_eq!(mx.total(), pairs.len() as u64);
                prop_assert_eq!(m.accuracy, (mx.tp + mx.tn) as f64 / mx.total() as f64);
                if m.precision + m.recall > 0.0 {
                    prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-9);
                }
                let mut shuffled = preds.clone();
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let m2 = compute_metrics("x", &shuffled, &truth).unwrap();
                prop_assert_eq!(m, m2);
            }
        }
    }
}
