//! One continuation request, with retries and the prefix-injection and
//! route fallbacks.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::answer::matches;
use crate::config::{ApiMode, EndpointConfig, PrefixMode};
use crate::error::{Error, Result};

/// User-turn wording when the prefix cannot be prefilled.
pub const PREFIX_TEMPLATE: &str =
    "{question}\n\nBelow is the beginning of a solution. Continue it from exactly where it stops, without repeating it.\n\n{prefix}";

/// Separator between question and prefix in plain-completion prompts.
pub const COMPLETION_SEPARATOR: &str = "\n\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Api {
    Chat,
    Completions,
}

/// How the prefix was delivered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Injection {
    /// Empty prefix: an unconditioned sample.
    None,
    Prefill,
    Template,
    /// Appended to a plain-completion prompt.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Correct,
    Incorrect,
    /// No answer could be extracted. Counts as incorrect.
    Unparsed,
}

impl Verdict {
    pub fn is_correct(self) -> bool {
        self == Verdict::Correct
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub request_id: String,
    pub question: String,
    pub prefix: String,
    pub continuation: String,
    /// Continuation split into the endpoint's tokens, when it reports them.
    pub tokens: Option<Vec<String>>,
    pub usage: Usage,
    pub latency_ms: f64,
    pub attempts: u32,
    /// Status codes of the failed attempts, in order.
    pub retried_statuses: Vec<u16>,
    pub api: Api,
    pub injection: Injection,
    pub extracted: Option<String>,
    pub verdict: Verdict,
}

/// A shared handle; clones use the same connection pool and concurrency bound.
#[derive(Clone)]
pub struct Client {
    inner: Arc<Inner>,
}

struct Inner {
    http: reqwest::Client,
    cfg: EndpointConfig,
    api_key: Option<String>,
    permits: Semaphore,
    chat_missing: AtomicBool,
    prefill_rejected: AtomicBool,
}

enum Attempt {
    Done(Value),
    Transient(String, Option<u16>, Option<Duration>),
    /// Fall back to another route or injection mode and resend.
    Switch,
    Fatal(Error),
}

impl Client {
    pub fn new(cfg: EndpointConfig) -> Result<Self> {
        cfg.validate()?;
        let api_key = cfg.api_key_env.as_deref().and_then(|k| std::env::var(k).ok());
        let http = reqwest::Client::builder().timeout(cfg.timeout()).build()?;
        Ok(Client {
            inner: Arc::new(Inner {
                http,
                permits: Semaphore::new(cfg.max_concurrent),
                api_key,
                cfg,
                chat_missing: AtomicBool::new(false),
                prefill_rejected: AtomicBool::new(false),
            }),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.inner.cfg
    }

    fn api(&self) -> Api {
        match self.inner.cfg.api {
            ApiMode::Chat => Api::Chat,
            ApiMode::Completions => Api::Completions,
            ApiMode::Auto if self.inner.chat_missing.load(Ordering::Relaxed) => Api::Completions,
            ApiMode::Auto => Api::Chat,
        }
    }

    fn injection(&self, api: Api, prefix: &str) -> Injection {
        if prefix.is_empty() {
            return Injection::None;
        }
        match (api, self.inner.cfg.prefix_mode) {
            (Api::Completions, _) => Injection::Raw,
            (Api::Chat, PrefixMode::Prefill) => Injection::Prefill,
            (Api::Chat, PrefixMode::Template) => Injection::Template,
            (Api::Chat, PrefixMode::Auto) if self.inner.prefill_rejected.load(Ordering::Relaxed) => Injection::Template,
            (Api::Chat, PrefixMode::Auto) => Injection::Prefill,
        }
    }

    /// Samples one continuation of `prefix` and judges `prefix + continuation`
    /// against `gold`. `seed` is forwarded for endpoints that honour it.
    pub async fn complete(
        &self,
        request_id: &str,
        question: &str,
        prefix: &str,
        gold: &str,
        seed: u64,
    ) -> Result<CompletionRecord> {
        let cfg = &self.inner.cfg;
        let started = Instant::now();
        let mut attempts = 0u32;
        let mut retried_statuses = Vec::new();
        let mut retries = 0u32;
        loop {
            let api = self.api();
            let injection = self.injection(api, prefix);
            attempts += 1;
            let outcome = {
                let _permit = self.inner.permits.acquire().await.expect("semaphore is never closed");
                self.attempt(api, injection, question, prefix, seed).await
            };
            match outcome {
                Attempt::Done(body) => {
                    let (continuation, tokens, usage) = parse_body(api, &body)?;
                    let extracted = cfg.answer_rule.extract(&format!("{prefix}{continuation}"));
                    let verdict = match &extracted {
                        None => Verdict::Unparsed,
                        Some(a) if matches(a, gold) => Verdict::Correct,
                        Some(_) => Verdict::Incorrect,
                    };
                    return Ok(CompletionRecord {
                        request_id: request_id.to_string(),
                        question: question.to_string(),
                        prefix: prefix.to_string(),
                        continuation,
                        tokens,
                        usage,
                        latency_ms: started.elapsed().as_secs_f64() * 1e3,
                        attempts,
                        retried_statuses,
                        api,
                        injection,
                        extracted,
                        verdict,
                    });
                }
                // A route or prefill fallback is not a retry.
                Attempt::Switch => attempts -= 1,
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(why, status, retry_after) => {
                    retried_statuses.extend(status);
                    if retries == cfg.max_retries {
                        return Err(Error::RetriesExhausted { attempts, last: why });
                    }
                    let wait = retry_after
                        .map_or_else(|| cfg.backoff(retries), |d| d.min(Duration::from_millis(cfg.backoff_max_ms)));
                    retries += 1;
                    tokio::time::sleep(wait).await;
                }
            }
        }
    }

    async fn attempt(&self, api: Api, injection: Injection, question: &str, prefix: &str, seed: u64) -> Attempt {
        let cfg = &self.inner.cfg;
        let (path, body) = request_body(cfg, api, injection, question, prefix, seed);
        let url = format!("{}/{path}", cfg.base_url.trim_end_matches('/'));
        let mut req = self.inner.http.post(url).json(&body);
        if let Some(key) = &self.inner.api_key {
            req = req.bearer_auth(key);
        }
        // Connection failures and timeouts are worth retrying.
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string(), None, None),
        };
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|s| s.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(Duration::from_secs_f64);
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) => return Attempt::Transient(e.to_string(), Some(status.as_u16()), None),
        };
        if status.is_success() {
            return match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fatal(Error::Malformed(format!("{e}: {text}"))),
            };
        }
        if is_transient(status) {
            return Attempt::Transient(format!("{status}: {text}"), Some(status.as_u16()), retry_after);
        }
        if api == Api::Chat
            && cfg.api == ApiMode::Auto
            && matches!(status, StatusCode::NOT_FOUND | StatusCode::METHOD_NOT_ALLOWED)
        {
            self.inner.chat_missing.store(true, Ordering::Relaxed);
            return Attempt::Switch;
        }
        if injection == Injection::Prefill
            && cfg.prefix_mode == PrefixMode::Auto
            && matches!(status, StatusCode::BAD_REQUEST | StatusCode::UNPROCESSABLE_ENTITY)
        {
            self.inner.prefill_rejected.store(true, Ordering::Relaxed);
            return Attempt::Switch;
        }
        Attempt::Fatal(Error::Status { status: status.as_u16(), body: text })
    }
}

fn is_transient(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS
        || status == StatusCode::REQUEST_TIMEOUT
        || matches!(status.as_u16(), 500 | 502 | 503 | 504)
}

/// Route and JSON body for one request.
pub fn request_body(
    cfg: &EndpointConfig,
    api: Api,
    injection: Injection,
    question: &str,
    prefix: &str,
    seed: u64,
) -> (&'static str, Value) {
    match api {
        Api::Chat => {
            let messages = match injection {
                Injection::Prefill => json!([
                    { "role": "user", "content": question },
                    { "role": "assistant", "content": prefix },
                ]),
                Injection::Template => json!([
                    { "role": "user", "content": PREFIX_TEMPLATE.replace("{question}", question).replace("{prefix}", prefix) },
                ]),
                Injection::None | Injection::Raw => json!([{ "role": "user", "content": question }]),
            };
            let mut body = json!({
                "model": cfg.model,
                "messages": messages,
                "max_tokens": cfg.max_tokens,
                "temperature": cfg.temperature,
                "seed": seed,
            });
            if cfg.request_logprobs {
                body["logprobs"] = json!(true);
            }
            ("chat/completions", body)
        }
        Api::Completions => {
            let prompt = if prefix.is_empty() {
                format!("{question}{COMPLETION_SEPARATOR}")
            } else {
                format!("{question}{COMPLETION_SEPARATOR}{prefix}")
            };
            let mut body = json!({
                "model": cfg.model,
                "prompt": prompt,
                "max_tokens": cfg.max_tokens,
                "temperature": cfg.temperature,
                "seed": seed,
            });
            if cfg.request_logprobs {
                body["logprobs"] = json!(1);
            }
            ("completions", body)
        }
    }
}

#[derive(Deserialize)]
struct RawUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

fn parse_body(api: Api, body: &Value) -> Result<(String, Option<Vec<String>>, Usage)> {
    let choice = body.get("choices").and_then(|c| c.get(0)).ok_or_else(|| Error::Malformed("no choices".into()))?;
    let (text, tokens) = match api {
        Api::Chat => {
            let text = choice.pointer("/message/content").and_then(Value::as_str);
            let tokens = choice.pointer("/logprobs/content").and_then(Value::as_array).map(|a| {
                a.iter().filter_map(|t| t.get("token").and_then(Value::as_str).map(str::to_string)).collect::<Vec<_>>()
            });
            (text, tokens)
        }
        Api::Completions => {
            let text = choice.get("text").and_then(Value::as_str);
            let tokens = choice
                .pointer("/logprobs/tokens")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(|t| t.as_str().map(str::to_string)).collect::<Vec<_>>());
            (text, tokens)
        }
    };
    let text = text.ok_or_else(|| Error::Malformed("choice has no text".into()))?.to_string();
    // Token lists that do not spell the text are useless for cutting prefixes.
    let tokens = tokens.filter(|t| !t.is_empty() && t.concat() == text);
    let usage = body
        .get("usage")
        .and_then(|u| serde_json::from_value::<RawUsage>(u.clone()).ok())
        .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
        .unwrap_or_default();
    Ok((text, tokens, usage))
}
