//! Narrative delay-log extraction.
//!
//! The rule backend is a small deterministic grammar: a date phrase, clock
//! times classified by the sentence they sit in, station names matched
//! against the network vocabulary (longest name first), direction keywords
//! and fault-cause keywords. Sentences about later days ("on the following
//! day ...") are ignored.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use chrono::{NaiveDate, NaiveTime};
use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use super::{DelayEvent, DelayType, EventInvalid, ExtractionResult, Provenance};
use crate::llm::{BackendError, DecodeParams, LlmBackend};
use crate::network::{Direction, Network};

pub const EXTRACTION_FIELDS: [&str; 8] =
    ["line", "delay_type", "date", "start", "end", "from_station", "to_station", "direction"];

pub enum ExtractBackend<'a> {
    Rule,
    Llm { backend: &'a dyn LlmBackend, params: DecodeParams, retry_budget: u32 },
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("no event found: narrative has no clock times")]
    NoEventFound,
    #[error("no end time found after the start time")]
    NoEndTime,
    #[error("no date found")]
    NoDate,
    #[error("no station from the network vocabulary found")]
    NoStation,
    #[error("cannot determine the line")]
    NoLine,
    #[error("stations are shared by several lines: {0:?}")]
    AmbiguousLine(Vec<String>),
    #[error("cannot determine the direction")]
    NoDirection,
    #[error("extracted event is invalid: {0}")]
    Invalid(#[from] EventInvalid),
    #[error("model reply unparseable after {attempts} attempts: {last}")]
    LlmUnparseable { attempts: u32, last: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Splits a file of narratives separated by blank lines.
pub fn split_narratives(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        out.push(cur.join("\n"));
    }
    out
}

pub fn extract_from_log(
    text: &str,
    network: &Network,
    backend: &ExtractBackend<'_>,
    default_event_id: u32,
) -> Result<ExtractionResult, ExtractError> {
    match backend {
        ExtractBackend::Rule => extract_rule(text, network, default_event_id),
        ExtractBackend::Llm { backend, params, retry_budget } => {
            extract_llm(text, network, *backend, params, *retry_budget, default_event_id)
        }
    }
}

macro_rules! re {
    ($name:ident, $pat:expr) => {
        fn $name() -> &'static Regex {
            static R: OnceLock<Regex> = OnceLock::new();
            R.get_or_init(|| Regex::new($pat).expect("valid regex"))
        }
    };
}

const MONTHS: &str = "january|february|march|april|may|june|july|august|september|october|november|december";

re!(re_ampm, r"(?i)\b([ap])\.m\.");
re!(re_sentence_end, r"[.!?;](?:\s+|$)");
re!(re_later_day, r"(?i)\b(following day|next day|day after|next morning)\b");
re!(re_event_id, r"(?i)\bevent\s*#\s*(\d+)");
re!(re_time, r"(?i)\b(\d{1,2}):(\d{2})(?:\s*([ap]m)\b)?");
re!(re_recovery, r"(?i)(restor|resum|recover|back to normal|returned to normal|normal service|last delayed train)");
re!(re_resolution, r"(?i)(resolv|repaired|fixed|removed|cleared)");
re!(re_line, r"(?i)\bline\s+(\d+)\b");
re!(re_direction, r"(?i)\b(up|down)(?:[\s-]*(?:line|direction|track)\b|bound\b)");
re!(re_terminus_prefix, r"(?i)(destined for|bound for|towards?|heading (?:to|for)|terminating at)\s+$");

fn re_date_mdy() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| Regex::new(&format!(r"(?i)\b({MONTHS})\s+(\d{{1,2}}),?\s+(\d{{4}})")).unwrap())
}

fn re_date_dmy() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| Regex::new(&format!(r"(?i)\b(\d{{1,2}})\s+({MONTHS}),?\s+(\d{{4}})")).unwrap())
}

re!(re_date_iso, r"\b(\d{4})[-/](\d{1,2})[-/](\d{1,2})\b");

fn month_number(name: &str) -> u32 {
    MONTHS.split('|').position(|m| m.eq_ignore_ascii_case(name)).map_or(0, |i| i as u32 + 1)
}

fn find_date(text: &str) -> Option<NaiveDate> {
    let mut hits: Vec<(usize, NaiveDate)> = Vec::new();
    if let Some(c) = re_date_mdy().captures(text) {
        let d = NaiveDate::from_ymd_opt(c[3].parse().ok()?, month_number(&c[1]), c[2].parse().ok()?);
        hits.extend(d.map(|d| (c.get(0).unwrap().start(), d)));
    }
    if let Some(c) = re_date_dmy().captures(text) {
        let d = NaiveDate::from_ymd_opt(c[3].parse().ok()?, month_number(&c[2]), c[1].parse().ok()?);
        hits.extend(d.map(|d| (c.get(0).unwrap().start(), d)));
    }
    if let Some(c) = re_date_iso().captures(text) {
        let d = NaiveDate::from_ymd_opt(c[1].parse().ok()?, c[2].parse().ok()?, c[3].parse().ok()?);
        hits.extend(d.map(|d| (c.get(0).unwrap().start(), d)));
    }
    hits.into_iter().min_by_key(|(pos, _)| *pos).map(|(_, d)| d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TimeRole {
    Plain,
    Resolution,
    Recovery,
}

fn find_times(sentences: &[&str]) -> Vec<(NaiveTime, TimeRole)> {
    let mut out = Vec::new();
    for s in sentences {
        let role = if re_recovery().is_match(s) {
            TimeRole::Recovery
        } else if re_resolution().is_match(s) {
            TimeRole::Resolution
        } else {
            TimeRole::Plain
        };
        for c in re_time().captures_iter(s) {
            let mut h: u32 = c[1].parse().unwrap_or(99);
            let m: u32 = c[2].parse().unwrap_or(99);
            match c.get(3).map(|x| x.as_str().to_ascii_lowercase()) {
                Some(ref p) if p == "pm" && h < 12 => h += 12,
                Some(ref p) if p == "am" && h == 12 => h = 0,
                _ => {}
            }
            if let Some(t) = NaiveTime::from_hms_opt(h, m, 0) {
                out.push((t, role));
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Mention {
    pos: usize,
    name: String,
    terminus: bool,
}

fn find_stations(text: &str, network: &Network) -> Vec<Mention> {
    let lower = text.to_ascii_lowercase();
    let mut vocab: Vec<&str> = network.vocabulary().collect();
    vocab.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    let mut claimed = vec![false; lower.len()];
    let mut out = Vec::new();
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric());
    for name in vocab {
        let needle = name.to_ascii_lowercase();
        let mut from = 0;
        while let Some(off) = lower[from..].find(&needle) {
            let start = from + off;
            let end = start + needle.len();
            from = start + 1;
            if is_word(lower[..start].chars().next_back()) || is_word(lower[end..].chars().next()) {
                continue;
            }
            if claimed[start..end].iter().any(|&c| c) {
                continue;
            }
            claimed[start..end].iter_mut().for_each(|c| *c = true);
            let terminus = re_terminus_prefix().is_match(&text[start.saturating_sub(24)..start]);
            out.push(Mention { pos: start, name: name.to_string(), terminus });
        }
    }
    out.sort_by_key(|m| m.pos);
    out
}

fn classify_cause(text: &str) -> Option<DelayType> {
    let t = text.to_ascii_lowercase();
    let groups: [(DelayType, &[&str]); 5] = [
        (
            DelayType::ImproperOperation,
            &["improper operation", "operational error", "mis-operation", "misoperation", "operator error", "human error"],
        ),
        (DelayType::SignalingFault, &["signal", "interlocking"]),
        (DelayType::PowerFault, &["power", "traction supply", "catenary", "overhead line", "substation"]),
        (
            DelayType::VehicleFault,
            &["vehicle fault", "vehicle failure", "train fault", "rolling stock", "brake", "bogie", "pantograph", "traction motor"],
        ),
        (DelayType::Others, &["door", "object", "foreign", "obstruct", "passenger", "intrusion", "others"]),
    ];
    groups.iter().find(|(_, kws)| kws.iter().any(|k| t.contains(k))).map(|(ty, _)| *ty)
}

fn extract_rule(text: &str, network: &Network, default_event_id: u32) -> Result<ExtractionResult, ExtractError> {
    let normalized = re_ampm().replace_all(text, |c: &regex::Captures| format!("{}M", c[1].to_ascii_uppercase()));
    let normalized = normalized.split_whitespace().collect::<Vec<_>>().join(" ");
    let sentences: Vec<&str> = re_sentence_end()
        .split(&normalized)
        .filter(|s| !s.trim().is_empty() && !re_later_day().is_match(s))
        .collect();
    let kept = sentences.join(". ");
    let mut flags: Vec<String> = Vec::new();

    let times = find_times(&sentences);
    if times.is_empty() {
        return Err(ExtractError::NoEventFound);
    }
    let start = times
        .iter()
        .find(|(_, r)| *r == TimeRole::Plain)
        .or_else(|| times.first())
        .map(|(t, _)| *t)
        .expect("non-empty");
    let latest = |role: TimeRole| times.iter().filter(|(t, r)| *r == role && *t > start).map(|(t, _)| *t).max();
    let end = if let Some(t) = latest(TimeRole::Recovery) {
        t
    } else if let Some(t) = latest(TimeRole::Resolution) {
        flags.push("end-from-fault-resolution".into());
        t
    } else if let Some(t) = latest(TimeRole::Plain) {
        flags.push("end-inferred".into());
        t
    } else {
        return Err(ExtractError::NoEndTime);
    };

    let date = find_date(&kept).ok_or(ExtractError::NoDate)?;
    let event_id = re_event_id()
        .captures(&normalized)
        .and_then(|c| c[1].parse().ok())
        .unwrap_or(default_event_id);

    let mentions = find_stations(&kept, network);
    let mut interval: Vec<String> = Vec::new();
    for m in mentions.iter().filter(|m| !m.terminus) {
        if !interval.contains(&m.name) {
            interval.push(m.name.clone());
        }
    }
    let termini: Vec<String> = mentions.iter().filter(|m| m.terminus).map(|m| m.name.clone()).collect();
    if interval.is_empty() {
        return Err(ExtractError::NoStation);
    }

    let line = match re_line().captures(&kept) {
        Some(c) => format!("Line {}", &c[1]),
        None => {
            flags.push("line-inferred".into());
            infer_line(network, &interval, &termini)?
        }
    };
    let line_ref = network.line(&line);

    let explicit_dir = re_direction().captures(&kept).and_then(|c| Direction::parse(&c[1]));
    let direction = match explicit_dir {
        Some(d) => d,
        None => {
            flags.push("direction-inferred".into());
            infer_direction(network, &line, &interval, &termini).ok_or(ExtractError::NoDirection)?
        }
    };

    let from_station = interval[0].clone();
    let to_station = match interval.get(1) {
        Some(s) => s.clone(),
        None => {
            flags.push("to-station-inferred".into());
            let line = line_ref.ok_or(ExtractError::NoLine)?;
            infer_far_end(network, line, &from_station, direction, &termini).ok_or(ExtractError::NoStation)?
        }
    };

    let delay_type = classify_cause(&kept).unwrap_or_else(|| {
        flags.push("type-defaulted".into());
        DelayType::Others
    });

    let event = DelayEvent { event_id, line, delay_type, date, start, end, from_station, to_station, direction };
    event.validate(Some(network))?;

    let provenance: BTreeMap<String, Provenance> =
        EXTRACTION_FIELDS.iter().map(|f| (f.to_string(), Provenance::Rule)).collect();
    let confidence = (1.0 - 0.2 * flags.len() as f64).max(0.2);
    Ok(ExtractionResult { event, confidence, provenance, flags })
}

fn infer_line(network: &Network, interval: &[String], termini: &[String]) -> Result<String, ExtractError> {
    let serving = |names: &[String]| -> Vec<String> {
        network
            .lines()
            .iter()
            .filter(|l| names.iter().all(|n| network.station_id(n).is_some_and(|id| l.position(id).is_some())))
            .map(|l| l.id.clone())
            .collect()
    };
    let all: Vec<String> = interval.iter().chain(termini).cloned().collect();
    let mut lines = serving(&all);
    if lines.is_empty() {
        lines = serving(interval);
    }
    match lines.len() {
        0 => Err(ExtractError::NoLine),
        1 => Ok(lines.remove(0)),
        _ => Err(ExtractError::AmbiguousLine(lines)),
    }
}

fn infer_direction(network: &Network, line: &str, interval: &[String], termini: &[String]) -> Option<Direction> {
    let line = network.line(line)?;
    let pos = |n: &str| network.station_id(n).and_then(|id| line.position(id));
    let anchor = pos(&interval[0])?;
    for t in termini {
        if let Some(p) = pos(t) {
            if p != anchor {
                return Some(if p > anchor { Direction::Up } else { Direction::Down });
            }
        }
    }
    let other = pos(interval.get(1)?)?;
    Some(if other > anchor { Direction::Up } else { Direction::Down })
}

/// With a single interval station, take the nearest terminus hint lying in
/// the travel direction, else the adjacent station.
fn infer_far_end(
    network: &Network,
    line: &crate::network::Line,
    from: &str,
    direction: Direction,
    termini: &[String],
) -> Option<String> {
    let anchor = line.position(network.station_id(from)?)?;
    let ahead = |p: usize| match direction {
        Direction::Up => p > anchor,
        Direction::Down => p < anchor,
    };
    let nearest = termini
        .iter()
        .filter_map(|t| line.position(network.station_id(t)?).map(|p| (p, t)))
        .filter(|(p, _)| ahead(*p))
        .min_by_key(|(p, _)| p.abs_diff(anchor))
        .map(|(_, t)| t.clone());
    nearest.or_else(|| {
        let next = match direction {
            Direction::Up if anchor + 1 < line.stations.len() => anchor + 1,
            Direction::Down if anchor > 0 => anchor - 1,
            _ if anchor > 0 => anchor - 1,
            _ => anchor + 1,
        };
        line.stations.get(next).map(|&id| network.station_name(id).to_string())
    })
}

#[derive(Debug, Deserialize)]
struct LlmEventReply {
    line: String,
    delay_type: String,
    date: String,
    start: String,
    end: String,
    from_station: String,
    to_station: String,
    direction: String,
}

fn extraction_prompt(text: &str, network: &Network) -> String {
    let mut lines = String::new();
    for l in network.lines() {
        let names: Vec<&str> = l.stations.iter().map(|&s| network.station_name(s)).collect();
        lines.push_str(&format!("- {} (Up = {} towards {}): {}\n", l.id, names[0], names[names.len() - 1], names.join(", ")));
    }
    format!(
        "You work in the operations department of an urban rail transit system.\n\
         Extract the delay event described in the log below into one JSON object with exactly these keys:\n\
         \"line\" (e.g. \"Line 5\"), \"delay_type\" (one of: Vehicle Fault, Signaling Fault, Power Fault, Improper Operation, Others), \
         \"date\" (YYYY-MM-DD), \"start\" (HH:MM, when the delay began), \"end\" (HH:MM, when normal service recovered; \
         use the fault resolution time only if no recovery time is given), \"from_station\" and \"to_station\" \
         (the two stations bounding the affected section), \"direction\" (\"Up\" or \"Down\").\n\
         Lines and stations in declared order:\n{lines}\
         Log:\n<<<\n{text}\n>>>\n\
         Reply with the JSON object only."
    )
}

fn parse_llm_reply(reply: &str, network: &Network, event_id: u32) -> Result<DelayEvent, String> {
    let (a, b) = match (reply.find('{'), reply.rfind('}')) {
        (Some(a), Some(b)) if a < b => (a, b),
        _ => return Err("no JSON object in reply".into()),
    };
    let r: LlmEventReply = serde_json::from_str(&reply[a..=b]).map_err(|e| e.to_string())?;
    let ev = DelayEvent {
        event_id,
        line: r.line.trim().to_string(),
        delay_type: r.delay_type.parse()?,
        date: NaiveDate::parse_from_str(r.date.trim(), "%Y-%m-%d").map_err(|e| format!("date: {e}"))?,
        start: crate::clock::parse_hhmm(&r.start).ok_or("start is not HH:MM")?,
        end: crate::clock::parse_hhmm(&r.end).ok_or("end is not HH:MM")?,
        from_station: r.from_station.trim().to_string(),
        to_station: r.to_station.trim().to_string(),
        direction: Direction::parse(&r.direction).ok_or("direction must be Up or Down")?,
    };
    ev.validate(Some(network)).map_err(|e| e.to_string())?;
    Ok(ev)
}

fn extract_llm(
    text: &str,
    network: &Network,
    backend: &dyn LlmBackend,
    params: &DecodeParams,
    retry_budget: u32,
    default_event_id: u32,
) -> Result<ExtractionResult, ExtractError> {
    let event_id = re_event_id().captures(text).and_then(|c| c[1].parse().ok()).unwrap_or(default_event_id);
    let base = extraction_prompt(text, network);
    let mut prompt = base.clone();
    let mut last = String::new();
    for attempt in 0..=retry_budget {
        match backend.complete(&prompt, params) {
            Ok(reply) => match parse_llm_reply(&reply, network, event_id) {
                Ok(event) => {
                    let provenance = EXTRACTION_FIELDS.iter().map(|f| (f.to_string(), Provenance::Llm)).collect();
                    let mut flags = Vec::new();
                    if attempt > 0 {
                        flags.push(format!("llm-retries-{attempt}"));
                    }
                    return Ok(ExtractionResult { event, confidence: 0.8, provenance, flags });
                }
                Err(e) => last = e,
            },
            Err(e) if attempt == retry_budget => return Err(e.into()),
            Err(e) => last = e.to_string(),
        }
        prompt = format!(
            "{base}\n\nYour previous reply could not be used ({last}). \
             Reply with ONLY a JSON object containing the eight keys listed above and nothing else."
        );
    }
    Err(ExtractError::LlmUnparseable { attempts: retry_budget + 1, last })
}
