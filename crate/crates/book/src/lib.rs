//! The guide under `book/`, compiled so its examples run as doc-tests.
#![doc = include_str!("../../../book/src/introduction.md")]

#[doc = include_str!("../../../book/src/tasks.md")]
pub mod tasks {}

#[doc = include_str!("../../../book/src/policy.md")]
pub mod policy {}

#[doc = include_str!("../../../book/src/rollout.md")]
pub mod rollout {}

#[doc = include_str!("../../../book/src/objective.md")]
pub mod objective {}

#[doc = include_str!("../../../book/src/schedule.md")]
pub mod schedule {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/probes.md")]
pub mod probes {}

#[doc = include_str!("../../../book/src/remote.md")]
pub mod remote {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
