use std::collections::BTreeMap;

use regex::Regex;

use crate::llm::{BackendError, DecodeParams, LlmBackend};

/// Offline stand-in for a hosted model. It reads the cases back out of the
/// prompt and answers ABANDON iff the passenger had not started, the delay
/// is in the morning peak, and urgency is below `p3_threshold`.
pub struct MockBackend {
    pub p3_threshold: f64,
    case_re: Regex,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(6.0)
    }
}

impl MockBackend {
    pub fn new(p3_threshold: f64) -> Self {
        MockBackend { p3_threshold, case_re: Regex::new(r"(?m)^Case (\d+): (.+)$").unwrap() }
    }

    fn decide(&self, fields: &BTreeMap<&str, &str>) -> Option<(bool, String)> {
        let started: bool = fields.get("started_before_delay")?.parse().ok()?;
        let period = *fields.get("delay_period")?;
        let p3: f64 = fields.get("urgency")?.parse().ok()?;
        let abandon = !started && period == "MorningPeak" && p3 < self.p3_threshold;
        let reason = if abandon {
            format!("not yet departed, morning peak, rigid schedule (urgency {p3:.2} min)")
        } else if started {
            "already inside the network, so riding out the delay is cheaper".to_string()
        } else {
            format!("flexible schedule or off-peak ({period}, urgency {p3:.2} min)")
        };
        Some((abandon, reason))
    }
}

impl LlmBackend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, prompt: &str, _params: &DecodeParams) -> Result<String, BackendError> {
        let mut reply = String::new();
        for cap in self.case_re.captures_iter(prompt) {
            let fields: BTreeMap<&str, &str> = cap[2]
                .split(';')
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.trim(), v.trim()))
                .collect();
            let Some((abandon, reason)) = self.decide(&fields) else {
                continue;
            };
            let choice = if abandon { "ABANDON" } else { "WAIT" };
            reply.push_str(&format!("Case {}: CHOICE: {choice}\nREASON: {reason}\n", &cap[1]));
        }
        if reply.is_empty() {
            return Err(BackendError::BadResponse("prompt contains no cases".into()));
        }
        Ok(reply)
    }
}
