//! Endpoint settings, read from a JSON file.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::answer::AnswerRule;
use crate::error::{Error, Result};

/// Which request shape to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApiMode {
    /// Chat first; switch to plain completions if the chat route is missing.
    #[default]
    Auto,
    Chat,
    Completions,
}

/// How a prefix reaches a chat endpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefixMode {
    /// Prefill; switch to the template if the endpoint rejects a trailing
    /// assistant message.
    #[default]
    Auto,
    /// The prefix is sent as the start of the assistant turn.
    Prefill,
    /// The prefix is quoted in the user turn with [`crate::PREFIX_TEMPLATE`].
    Template,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Up to and including the version segment, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset means no auth.
    pub api_key_env: Option<String>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub timeout_secs: f64,
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub max_concurrent: usize,
    pub backoff_initial_ms: u64,
    pub backoff_max_ms: u64,
    pub api: ApiMode,
    pub prefix_mode: PrefixMode,
    /// Ask for per-token output so prefixes can be cut in model tokens.
    pub request_logprobs: bool,
    pub answer_rule: AnswerRule,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            max_tokens: 1024,
            temperature: 1.0,
            timeout_secs: 120.0,
            max_retries: 3,
            max_concurrent: 8,
            backoff_initial_ms: 500,
            backoff_max_ms: 30_000,
            api: ApiMode::Auto,
            prefix_mode: PrefixMode::Auto,
            request_logprobs: true,
            answer_rule: AnswerRule::default(),
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_url.trim().is_empty() {
            return Err(Error::Config("base_url is empty".into()));
        }
        if self.max_concurrent == 0 {
            return Err(Error::Config("max_concurrent must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config(format!("timeout_secs must be positive, got {}", self.timeout_secs)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: EndpointConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.backoff_initial_ms.saturating_mul(1u64 << retry.min(30));
        Duration::from_millis(ms.min(self.backoff_max_ms))
    }
}
