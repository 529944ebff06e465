//! A local OpenAI-compatible server for tests and offline demos.
//!
//! The scripted model answers `Compute A <op> B.` questions along one of two
//! fixed reasoning paths. A fresh sample takes the careful path with
//! probability `accuracy` and then answers correctly; a continuation of a
//! known path keeps that path's outcome with probability `lock_in`. All
//! draws are keyed by the request's `seed`, so responses do not depend on
//! arrival order.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::client::{COMPLETION_SEPARATOR, PREFIX_TEMPLATE};

#[derive(Clone, Debug, PartialEq)]
pub enum MockModel {
    /// Always answers `\boxed{answer}`.
    Echo {
        answer: String,
    },
    Arithmetic {
        accuracy: f64,
        lock_in: f64,
    },
}

/// A canned reply served instead of a completion.
#[derive(Clone, Debug, PartialEq)]
pub enum Scripted {
    Status(u16),
    /// Status with a `Retry-After` header in seconds.
    StatusRetryAfter(u16, f64),
    /// 200 with a body that is not JSON.
    Garbage,
}

#[derive(Clone, Debug)]
pub struct MockConfig {
    pub model: MockModel,
    /// Served, in order, to the first requests that arrive.
    pub script: Vec<Scripted>,
    pub latency: Duration,
    pub chat_route: bool,
    /// Accept a trailing assistant message on the chat route.
    pub prefill: bool,
    /// Include per-token output in responses.
    pub tokens: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            model: MockModel::Arithmetic { accuracy: 0.5, lock_in: 0.9 },
            script: Vec::new(),
            latency: Duration::ZERO,
            chat_route: true,
            prefill: true,
            tokens: true,
        }
    }
}

/// Counters the tests assert on.
#[derive(Debug, Default)]
pub struct MockStats {
    pub requests: AtomicUsize,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    pub scripted_served: AtomicUsize,
    pub chat_requests: AtomicUsize,
    pub completion_requests: AtomicUsize,
    pub prefill_requests: AtomicUsize,
    pub template_requests: AtomicUsize,
}

impl MockStats {
    pub fn get(counter: &AtomicUsize) -> usize {
        counter.load(Ordering::SeqCst)
    }
}

struct Shared {
    cfg: MockConfig,
    script: Mutex<VecDeque<Scripted>>,
    stats: Arc<MockStats>,
}

pub struct MockServer {
    pub addr: SocketAddr,
    pub stats: Arc<MockStats>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl MockServer {
    /// Binds an ephemeral port on localhost and starts serving.
    pub async fn start(cfg: MockConfig) -> std::io::Result<Self> {
        let stats = Arc::new(MockStats::default());
        let shared =
            Arc::new(Shared { script: Mutex::new(cfg.script.iter().cloned().collect()), cfg, stats: stats.clone() });
        let app = Router::new()
            .route("/v1/chat/completions", post(chat))
            .route("/v1/completions", post(completions))
            .with_state(shared);
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await;
        });
        Ok(MockServer { addr, stats, stop: Some(stop), task })
    }

    /// Base URL including the version segment.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        let _ = (&mut self.task).await;
    }
}

struct InFlight<'a>(&'a MockStats);

impl<'a> InFlight<'a> {
    fn enter(stats: &'a MockStats) -> Self {
        stats.requests.fetch_add(1, Ordering::SeqCst);
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(stats)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn error(status: StatusCode, msg: &str) -> Response {
    (status, Json(json!({ "error": { "message": msg } }))).into_response()
}

/// Sleeps, then serves the next scripted reply if any is left.
async fn preamble(s: &Shared) -> Option<Response> {
    if !s.cfg.latency.is_zero() {
        tokio::time::sleep(s.cfg.latency).await;
    }
    let next = s.script.lock().unwrap().pop_front()?;
    s.stats.scripted_served.fetch_add(1, Ordering::SeqCst);
    let resp = match next {
        Scripted::Status(code) => error(StatusCode::from_u16(code).unwrap(), "scripted failure"),
        Scripted::StatusRetryAfter(code, secs) => {
            let mut headers = HeaderMap::new();
            headers.insert("retry-after", HeaderValue::from_str(&secs.to_string()).unwrap());
            (StatusCode::from_u16(code).unwrap(), headers, "slow down").into_response()
        }
        Scripted::Garbage => (StatusCode::OK, "{not json").into_response(),
    };
    Some(resp)
}

async fn chat(State(s): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    let _guard = InFlight::enter(&s.stats);
    if let Some(r) = preamble(&s).await {
        return r;
    }
    if !s.cfg.chat_route {
        return error(StatusCode::NOT_FOUND, "no chat route");
    }
    s.stats.chat_requests.fetch_add(1, Ordering::SeqCst);
    let Some(messages) = body.get("messages").and_then(Value::as_array) else {
        return error(StatusCode::BAD_REQUEST, "messages missing");
    };
    let content = |m: &Value| m.get("content").and_then(Value::as_str).unwrap_or_default().to_string();
    let (question, prefix) = match messages.as_slice() {
        [user, asst] if asst.get("role").and_then(Value::as_str) == Some("assistant") => {
            if !s.cfg.prefill {
                return error(StatusCode::BAD_REQUEST, "assistant prefill is not supported");
            }
            s.stats.prefill_requests.fetch_add(1, Ordering::SeqCst);
            (content(user), content(asst))
        }
        [user] => {
            let text = content(user);
            match split_template(&text) {
                Some((q, p)) => {
                    s.stats.template_requests.fetch_add(1, Ordering::SeqCst);
                    (q, p)
                }
                None => (text, String::new()),
            }
        }
        _ => return error(StatusCode::BAD_REQUEST, "unsupported message layout"),
    };
    let seed = body.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let text = generate(&s.cfg.model, &question, &prefix, seed);
    let tokens = tokenize(&text);
    let mut choice =
        json!({ "index": 0, "message": { "role": "assistant", "content": text }, "finish_reason": "stop" });
    if s.cfg.tokens && body.get("logprobs").and_then(Value::as_bool) == Some(true) {
        choice["logprobs"] =
            json!({ "content": tokens.iter().map(|t| json!({ "token": t, "logprob": -0.1 })).collect::<Vec<_>>() });
    }
    Json(json!({
        "object": "chat.completion",
        "choices": [choice],
        "usage": usage(&question, &prefix, tokens.len()),
    }))
    .into_response()
}

async fn completions(State(s): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    let _guard = InFlight::enter(&s.stats);
    if let Some(r) = preamble(&s).await {
        return r;
    }
    s.stats.completion_requests.fetch_add(1, Ordering::SeqCst);
    let Some(prompt) = body.get("prompt").and_then(Value::as_str) else {
        return error(StatusCode::BAD_REQUEST, "prompt missing");
    };
    let (question, prefix) = prompt.split_once(COMPLETION_SEPARATOR).unwrap_or((prompt, ""));
    let seed = body.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let text = generate(&s.cfg.model, question, prefix, seed);
    let tokens = tokenize(&text);
    let mut choice = json!({ "index": 0, "text": text, "finish_reason": "stop" });
    if s.cfg.tokens && body.get("logprobs").is_some_and(|v| !v.is_null()) {
        choice["logprobs"] = json!({ "tokens": tokens, "token_logprobs": vec![-0.1; tokens.len()] });
    }
    Json(json!({ "object": "text_completion", "choices": [choice], "usage": usage(question, prefix, tokens.len()) }))
        .into_response()
}

fn usage(question: &str, prefix: &str, completion: usize) -> Value {
    let prompt = question.split_whitespace().count() + prefix.split_whitespace().count();
    json!({ "prompt_tokens": prompt, "completion_tokens": completion, "total_tokens": prompt + completion })
}

fn split_template(text: &str) -> Option<(String, String)> {
    let (head, tail) = PREFIX_TEMPLATE.split_once("{question}")?.1.split_once("{prefix}")?;
    debug_assert!(tail.is_empty());
    let at = text.find(head)?;
    Some((text[..at].to_string(), text[at + head.len()..].to_string()))
}

/// Word-level tokens whose concatenation is the text.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_inclusive(' ').map(str::to_string).collect()
}

/// `Compute A + B.` style questions: the two operands and the result.
pub fn solve(question: &str) -> Option<(i64, i64, i64)> {
    let words: Vec<&str> = question.split_whitespace().map(|w| w.trim_end_matches(['.', '?'])).collect();
    let i = words.iter().position(|w| w.parse::<i64>().is_ok())?;
    let a = words[i].parse().ok()?;
    let b = words.get(i + 2)?.parse().ok()?;
    let v = match *words.get(i + 1)? {
        "+" => a + b,
        "-" => a - b,
        "*" => a * b,
        _ => return None,
    };
    Some((a, b, v))
}

fn careful(a: i64, b: i64, answer: i64) -> String {
    format!("First I line up the operands {a} and {b} and work through the operation one step at a time. The result is {answer}. Answer: \\boxed{{{answer}}}")
}

fn hasty(answer: i64) -> String {
    format!("This looks easy so I will go with my first instinct without checking anything. It is probably {answer}. Answer: \\boxed{{{answer}}}")
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(seed: u64, salt: u64) -> f64 {
    (mix(seed ^ mix(salt)) >> 11) as f64 / (1u64 << 53) as f64
}

/// The continuation the scripted model produces after `prefix`.
pub fn generate(model: &MockModel, question: &str, prefix: &str, seed: u64) -> String {
    let full = match model {
        MockModel::Echo { answer } => format!("The answer is \\boxed{{{answer}}}."),
        MockModel::Arithmetic { accuracy, lock_in } => {
            let Some((a, b, v)) = solve(question) else {
                return "I cannot parse this question.".into();
            };
            let wrong = v + 1 + (mix(seed) % 5) as i64;
            let u = uniform(seed, 1);
            // The first letter tells the two paths apart.
            match prefix.trim_start().chars().next() {
                Some('F') => careful(a, b, if u < *lock_in { v } else { wrong }),
                Some('T') => hasty(if u < *lock_in { wrong } else { v }),
                _ if u < *accuracy => careful(a, b, v),
                _ => hasty(wrong),
            }
        }
    };
    // A prefix that already departs from the chosen text still gets a final answer.
    match full.strip_prefix(prefix) {
        Some(rest) => rest.to_string(),
        None => format!(" {}", &full[full.rfind("Answer:").unwrap_or(0)..]),
    }
}
#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_round_trips() {
        let text = PREFIX_TEMPLATE.replace("{question}", "Compute 2 + 3.").replace("{prefix}", "First I");
        assert_eq!(split_template(&text), Some(("Compute 2 + 3.".into(), "First I".into())));
        assert_eq!(split_template("plain question"), None);
    }

    #[test]
    fn scripted_model_locks_in() {
        let m = MockModel::Arithmetic { accuracy: 0.5, lock_in: 1.0 };
        let q = "Compute 2 + 3.";
        for seed in 0..50 {
            let good = generate(&m, q, "First I line", seed);
            assert!(good.ends_with("\\boxed{5}"), "{good}");
            assert!(good.starts_with(" up the operands"));
            let bad = generate(&m, q, "This looks", seed);
            assert!(!bad.ends_with("\\boxed{5}"), "{bad}");
        }
        assert_eq!(solve("Compute 4 * 3."), Some((4, 3, 12)));
        assert_eq!(tokenize("a b  c").concat(), "a b  c");
    }
}
