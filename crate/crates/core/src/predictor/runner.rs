use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::{build_prompt, PromptBundle, PromptError, PromptTemplate};
use super::Prediction;
use crate::choice::{ChoiceLabel, ChoiceRecord, RecordKey};
use crate::delay::DelayEvent;
use crate::llm::{complete_with_retry, map_bounded, BackendError, DecodeParams, LlmBackend};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunParams {
    /// Extra attempts allowed, both for transport failures and for
    /// re-asking malformed cases.
    pub retry_budget: u32,
    pub decode: DecodeParams,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams { retry_budget: 3, decode: DecodeParams::default() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("batch failed ({cause}); unresolved: {}", fmt_keys(.unresolved))]
pub struct BatchError {
    pub cause: BackendError,
    pub unresolved: Vec<RecordKey>,
    /// Cases answered before the failure.
    pub partial: Vec<Prediction>,
}

fn fmt_keys(keys: &[RecordKey]) -> String {
    keys.iter().map(|(c, e)| format!("{c}@{e}")).collect::<Vec<_>>().join(", ")
}

fn case_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[\s*#>\-]*case\s*#?\s*(\d+)\b").unwrap())
}

fn choice_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)choice\s*[:=\-]?\s*\**\s*(wait|abandon)\b").unwrap())
}

fn reason_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)reason\s*[:\-]\s*\**\s*(.+?)\s*$").unwrap())
}

fn parse_segment(seg: &str) -> Option<(ChoiceLabel, String)> {
    let mut labels = choice_re().captures_iter(seg).map(|c| c[1].parse::<ChoiceLabel>().expect("regex limits values"));
    let first = labels.next()?;
    if labels.any(|l| l != first) {
        return None;
    }
    let reason = reason_re().captures(seg).map(|c| c[1].to_string()).unwrap_or_default();
    Some((first, reason))
}

/// Extracts `(label, reason)` for each expected case number. Prose around
/// the answers is ignored. A case whose segment carries no choice, or two
/// different choices, is left out.
pub fn parse_reply(reply: &str, expected: &[usize]) -> BTreeMap<usize, (ChoiceLabel, String)> {
    let markers: Vec<(usize, usize)> = case_marker()
        .captures_iter(reply)
        .filter_map(|c| Some((c.get(0)?.start(), c[1].parse().ok()?)))
        .collect();
    let mut out = BTreeMap::new();
    if markers.is_empty() {
        if let ([n], Some(ans)) = (expected, parse_segment(reply)) {
            out.insert(*n, ans);
        }
        return out;
    }
    let mut seen: HashMap<usize, Option<(ChoiceLabel, String)>> = HashMap::new();
    for (i, &(at, n)) in markers.iter().enumerate() {
        let end = markers.get(i + 1).map_or(reply.len(), |m| m.0);
        let ans = parse_segment(&reply[at..end]);
        match seen.get(&n) {
            None => {
                seen.insert(n, ans);
            }
            Some(prev) => {
                let agree = matches!((prev, &ans), (Some(a), Some(b)) if a.0 == b.0);
                if !agree && ans.is_some() && prev.is_some() {
                    seen.insert(n, None);
                } else if prev.is_none() {
                    seen.insert(n, ans);
                }
            }
        }
    }
    for n in expected {
        if let Some(Some(ans)) = seen.remove(n) {
            out.insert(*n, ans);
        }
    }
    out
}

/// Runs one prompt bundle to completion. Malformed cases are re-asked with
/// the stricter instruction until the retry budget runs out, then reported
/// unresolved.
pub fn run_llm_predictor(
    backend: &dyn LlmBackend,
    bundle: &PromptBundle,
    params: &RunParams,
) -> Result<Vec<Prediction>, BatchError> {
    let mut resolved: BTreeMap<usize, Prediction> = BTreeMap::new();
    let mut pending: Vec<usize> = bundle.cases.iter().map(|c| c.number).collect();
    let key_of = |n: usize| bundle.cases[n - 1].key.clone();
    let mut retries = 0u32;
    let mut reformat_rounds = 0u32;
    let mut prompt = bundle.render();
    loop {
        let (result, transport_retries) = complete_with_retry(backend, &prompt, &params.decode, params.retry_budget);
        retries += transport_retries;
        let reply = match result {
            Ok(r) => r,
            Err(cause) => {
                return Err(BatchError {
                    cause,
                    unresolved: pending.iter().map(|&n| key_of(n)).collect(),
                    partial: resolved.into_values().collect(),
                })
            }
        };
        let parsed = parse_reply(&reply, &pending);
        for (n, (label, rationale)) in parsed {
            let (card_id, event_id) = key_of(n);
            resolved.insert(
                n,
                Prediction { card_id, event_id, label: Some(label), backend: backend.id().to_string(), rationale, retry_count: retries },
            );
        }
        pending.retain(|n| !resolved.contains_key(n));
        if pending.is_empty() {
            break;
        }
        if reformat_rounds >= params.retry_budget {
            log::warn!("{} case(s) unresolved after {reformat_rounds} reformat attempts", pending.len());
            for &n in &pending {
                resolved.insert(n, Prediction::unresolved(&key_of(n), backend.id(), retries, "no parseable answer"));
            }
            break;
        }
        reformat_rounds += 1;
        retries += 1;
        prompt = bundle.render_retry(&pending);
    }
    Ok(resolved.into_values().collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LlmRunOutput {
    /// One prediction per input record, in input order.
    pub predictions: Vec<Prediction>,
    pub batch_errors: Vec<BatchError>,
}

/// Batches records per event, at most `batch_size` per prompt, and runs the
/// batches with bounded concurrency.
pub fn predict_llm(
    backend: &dyn LlmBackend,
    records: &[ChoiceRecord],
    events: &BTreeMap<u32, DelayEvent>,
    template: &PromptTemplate,
    params: &RunParams,
    batch_size: usize,
    max_in_flight: usize,
) -> Result<LlmRunOutput, PromptError> {
    let mut by_event: BTreeMap<u32, Vec<ChoiceRecord>> = BTreeMap::new();
    for r in records {
        by_event.entry(r.event_id).or_default().push(r.unlabeled());
    }
    let size = batch_size.clamp(1, template.max_cases.max(1));
    let mut bundles = Vec::new();
    for (id, recs) in &by_event {
        let event = events.get(id).ok_or(PromptError::UnknownEvent(*id))?;
        for chunk in recs.chunks(size) {
            bundles.push(build_prompt(chunk, event, template)?);
        }
    }
    log::info!("{} record(s) in {} prompt batch(es)", records.len(), bundles.len());
    let results = map_bounded(&bundles, max_in_flight, |b| run_llm_predictor(backend, b, params));

    let mut by_key: HashMap<RecordKey, Prediction> = HashMap::new();
    let mut batch_errors = Vec::new();
    for r in results {
        match r {
            Ok(ps) => by_key.extend(ps.into_iter().map(|p| (p.key(), p))),
            Err(e) => {
                log::error!("{e}");
                by_key.extend(e.partial.iter().cloned().map(|p| (p.key(), p)));
                for k in &e.unresolved {
                    by_key.insert(k.clone(), Prediction::unresolved(k, backend.id(), params.retry_budget, &e.cause.to_string()));
                }
                batch_errors.push(e);
            }
        }
    }
    let predictions = records
        .iter()
        .map(|r| by_key.remove(&r.key()).unwrap_or_else(|| Prediction::unresolved(&r.key(), backend.id(), 0, "duplicate record key")))
        .collect();
    Ok(LlmRunOutput { predictions, batch_errors })
}
