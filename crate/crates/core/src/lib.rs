//! Prefix-token policy optimization on synthetic verifiable tasks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tasks`]: vocabulary, dataset generation, answer verification
//! - [`policy`]: a linear-softmax autoregressive policy with exact gradients
//! - [`rollout`]: group sampling, prefixes, continuations, accumulated reward
//! - [`objective`]: advantages, the prefix mask, the clipped surrogate
//! - [`schedule`]: validation and the η schedule
//! - [`harness`]: training driver, metrics, checkpoints, probes

pub mod error;
pub mod harness;
pub mod objective;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod schedule;
pub mod tasks;

pub use error::{Error, Result};
pub use rng::SeedStream;
