//! Where relation-mining responses come from: a live chat-completion
//! endpoint or a recorded query log.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use super::QueryLog;
use crate::error::{Error, Result};

pub const ENV_BASE_URL: &str = "OVMLR_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "OVMLR_LLM_API_KEY";
pub const ENV_MODEL: &str = "OVMLR_LLM_MODEL";
pub const DEFAULT_MODEL: &str = "gpt-4o-mini";

#[derive(Clone, Debug)]
pub struct LiveConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub top_p: f64,
    pub timeout: Duration,
    pub attempts: usize,
    /// Delay before the second attempt; doubles after every failure.
    pub backoff: Duration,
    /// Upper bound on concurrent requests.
    pub max_in_flight: usize,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>, top_p: f64) -> Self {
        LiveConfig {
            base_url: base_url.into(),
            api_key: None,
            model: DEFAULT_MODEL.to_string(),
            top_p,
            timeout: Duration::from_secs(60),
            attempts: 3,
            backoff: Duration::from_millis(500),
            max_in_flight: 4,
        }
    }

    /// Reads the endpoint, credential and model from the environment.
    pub fn from_env(top_p: f64) -> Result<Self> {
        let base = std::env::var(ENV_BASE_URL)
            .map_err(|_| Error::Config(format!("{ENV_BASE_URL} is not set")))?;
        let mut cfg = LiveConfig::new(base, top_p);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        if let Ok(model) = std::env::var(ENV_MODEL) {
            if !model.is_empty() {
                cfg.model = model;
            }
        }
        Ok(cfg)
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn request_once(&self, agent: &ureq::Agent, prompt: &str) -> std::result::Result<String, String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "top_p": self.top_p,
        });
        let mut req = agent
            .post(&self.endpoint())
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_string(&body.to_string()).map_err(|e| e.to_string())?;
        let text = resp.into_string().map_err(|e| e.to_string())?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }

    /// Sends one prompt, retrying with exponential backoff.
    pub fn query(&self, prompt: &str) -> Result<String> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let attempts = self.attempts.max(1);
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.request_once(&agent, prompt) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("query attempt {} of {attempts} failed: {e}", attempt + 1);
                    last = e;
                }
            }
            if attempt + 1 < attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }
}

/// Recorded responses keyed by `(class, query_index)`.
#[derive(Clone, Debug, Default)]
pub struct ReplayStore {
    responses: HashMap<(String, usize), String>,
}

impl ReplayStore {
    pub fn from_logs(logs: impl IntoIterator<Item = QueryLog>) -> Self {
        let mut responses = HashMap::new();
        for log in logs {
            responses.insert((log.class, log.query_index), log.raw);
        }
        ReplayStore { responses }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_logs(crate::files::read_jsonl::<QueryLog>(path)?))
    }

    pub fn get(&self, class: &str, query_index: usize) -> Result<String> {
        self.responses
            .get(&(class.to_string(), query_index))
            .cloned()
            .ok_or_else(|| Error::Fixture {
                class: class.to_string(),
                query_index,
            })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

#[derive(Clone, Debug)]
pub enum Backend {
    Live(LiveConfig),
    Replay(ReplayStore),
}

impl Backend {
    pub fn query(&self, class: &str, query_index: usize, prompt: &str) -> Result<String> {
        match self {
            Backend::Live(cfg) => cfg.query(prompt),
            Backend::Replay(store) => store.get(class, query_index),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        match self {
            Backend::Live(cfg) => cfg.max_in_flight.max(1),
            Backend::Replay(_) => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_round_trip_and_missing() {
        let raw = "Related Category 1: a\n  odd  spacing\t\n".to_string();
        let store = ReplayStore::from_logs([QueryLog {
            class: "b".into(),
            query_index: 1,
            raw: raw.clone(),
            parse_status: String::new(),
        }]);
        assert_eq!(store.get("b", 1).unwrap(), raw);
        let err = store.get("b", 2).unwrap_err();
        assert!(matches!(err, Error::Fixture { query_index: 2, .. }));
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let mut cfg = LiveConfig::new("http://127.0.0.1:1", 0.3);
        cfg.backoff = Duration::from_millis(1);
        cfg.timeout = Duration::from_secs(2);
        match cfg.query("hello") {
            Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}
