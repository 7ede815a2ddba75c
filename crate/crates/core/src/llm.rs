//! Language-model backend contract, a scripted test double, an
//! OpenAI-compatible HTTP client, and bounded-concurrency fan-out.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
    #[error("scripted backend ran out of replies")]
    Exhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { temperature: 0.0, max_tokens: 2048 }
    }
}

pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, prompt: &str, params: &DecodeParams) -> Result<String, BackendError>;
}

/// Replays a fixed queue of replies and records every prompt it receives.
#[derive(Default)]
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<Result<String, BackendError>>>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_results(replies.into_iter().map(|r| Ok(r.into())))
    }

    pub fn with_results<I: IntoIterator<Item = Result<String, BackendError>>>(replies: I) -> Self {
        ScriptedBackend { replies: Mutex::new(replies.into_iter().collect()), prompts: Mutex::default() }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl LlmBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, prompt: &str, _params: &DecodeParams) -> Result<String, BackendError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        self.replies.lock().unwrap().pop_front().unwrap_or(Err(BackendError::Exhausted))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            api_key_env: "DELAYPTC_API_KEY".into(),
            timeout_secs: 60,
        }
    }
}

/// Chat-completions client. The key is read from the environment once, at
/// construction.
pub struct HttpBackend {
    config: HttpConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn from_env(config: HttpConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| BackendError::MissingCredential(config.api_key_env.clone()))?;
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(config.timeout_secs)).build();
        Ok(HttpBackend { config, api_key, agent })
    }
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, prompt: &str, params: &DecodeParams) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let resp: serde_json::Value = self
            .agent
            .post(&self.config.endpoint)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?
            .into_json()
            .map_err(|e| BackendError::BadResponse(e.to_string()))?;
        resp.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| BackendError::BadResponse("no choices[0].message.content".into()))
    }
}

/// Calls `backend` until it succeeds or `retry_budget` extra attempts are
/// spent. Returns the last result and the number of retries used.
pub fn complete_with_retry(
    backend: &dyn LlmBackend,
    prompt: &str,
    params: &DecodeParams,
    retry_budget: u32,
) -> (Result<String, BackendError>, u32) {
    let mut retries = 0;
    loop {
        match backend.complete(prompt, params) {
            Ok(reply) => return (Ok(reply), retries),
            Err(e) if retries >= retry_budget => return (Err(e), retries),
            Err(e) => {
                log::warn!("backend {} failed ({e}); retrying", backend.id());
                retries += 1;
            }
        }
    }
}

/// Runs `job` over every item with at most `max_in_flight` concurrent calls.
/// Results come back in input order regardless of completion order.
pub fn map_bounded<T, R, F>(items: &[T], max_in_flight: usize, job: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = max_in_flight.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = job(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().expect("every slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_replays_in_order() {
        let b = ScriptedBackend::new(["one", "two"]);
        let p = DecodeParams::default();
        assert_eq!(b.complete("a", &p).unwrap(), "one");
        assert_eq!(b.complete("b", &p).unwrap(), "two");
        assert_eq!(b.complete("c", &p), Err(BackendError::Exhausted));
        assert_eq!(b.prompts(), vec!["a", "b", "c"]);
    }

    #[test]
    fn retry_budget() {
        let b = ScriptedBackend::with_results([
            Err(BackendError::Transport("reset".into())),
            Err(BackendError::Transport("reset".into())),
            Ok("fine".to_string()),
        ]);
        let (r, n) = complete_with_retry(&b, "p", &DecodeParams::default(), 2);
        assert_eq!((r.unwrap().as_str(), n), ("fine", 2));

        let b = ScriptedBackend::with_results([Err(BackendError::Transport("x".into()))]);
        let (r, n) = complete_with_retry(&b, "p", &DecodeParams::default(), 0);
        assert!(r.is_err());
        assert_eq!(n, 0);
    }

    #[test]
    fn bounded_map_keeps_order() {
        let items: Vec<u64> = (0..50).collect();
        let in_flight = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let out = map_bounded(&items, 3, |&x| {
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis((50 - x) % 7));
            in_flight.fetch_sub(1, Ordering::SeqCst);
            x * 2
        });
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn http_backend_requires_key() {
        let cfg = HttpConfig { api_key_env: "METRO_CHOICE_TEST_UNSET_KEY".into(), ..Default::default() };
        assert!(matches!(HttpBackend::from_env(cfg), Err(BackendError::MissingCredential(_))));
    }
}
