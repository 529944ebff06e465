//! Client for running the lock-in probe against OpenAI-compatible inference
//! endpoints.
//!
//! [`Client::complete`] samples one continuation of a fixed prefix, using
//! assistant-turn prefill when the endpoint accepts it and a quoted-prefix
//! template otherwise, and retries rate limits and server errors with
//! exponential backoff. [`run_remote_probe`] runs the full protocol with a
//! bounded number of requests in flight. [`mock`] serves a scripted model
//! locally so all of this can be exercised without a network.

pub mod answer;
pub mod client;
pub mod config;
pub mod error;
pub mod mock;
pub mod probe;

pub use answer::AnswerRule;
pub use client::{Api, Client, CompletionRecord, Injection, Usage, Verdict, PREFIX_TEMPLATE};
pub use config::{ApiMode, EndpointConfig, PrefixMode};
pub use error::{Error, Result};
pub use probe::{read_problems, run_remote_probe, Problem, RemoteProbeConfig, RemoteProbeReport};
