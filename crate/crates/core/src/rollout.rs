//! Group sampling, prefix extraction, continuation sampling and the
//! continuation-accumulated reward.
//!
//! All sampling here is done with the step's snapshot. Each original output
//! `i` draws from stream `orig/i` and each continuation `j` of prefix `i`
//! from `cont/i/j`, so the result does not depend on how work is scheduled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_unchecked, PolicyParams, Scratch};
use crate::rng::SeedStream;
use crate::tasks::{verify_correct, verify_format, FormatRule, TaskInstance, Token, Vocab};

/// One sampled output with the sampling policy's per-token log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub instance_id: u64,
    pub generated: Vec<Token>,
    pub old_logprobs: Vec<f64>,
    pub terminated_by_eos: bool,
}

/// A retained prefix of one original output and the continuations sampled
/// from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixGroup {
    pub source: Rollout,
    pub prefix: Vec<Token>,
    pub continuations: Vec<Vec<Token>>,
    /// Correct continuations plus the original's own correctness.
    pub reward: u32,
    pub source_correct: bool,
    /// Optional weighted format term; zero unless enabled in [`RewardConfig`].
    pub format_bonus: f64,
    pub eta_used: f64,
}

impl PrefixGroup {
    pub fn total_reward(&self) -> f64 {
        f64::from(self.reward) + self.format_bonus
    }

    pub fn dump(&self) -> GroupDump {
        GroupDump {
            instance_id: self.source.instance_id,
            prefix: self.prefix.iter().map(|t| t.0).collect(),
            reward: self.reward,
            continuation_lengths: self.continuations.iter().map(Vec::len).collect(),
        }
    }
}

/// Debug record written by `--dump-rollouts`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDump {
    pub instance_id: u64,
    pub prefix: Vec<u32>,
    pub reward: u32,
    pub continuation_lengths: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub format_rule: FormatRule,
    /// Weight of the format indicator added to each group's reward.
    pub format_weight: f64,
}

/// Sizes for one instance's groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupPlan {
    pub n: usize,
    pub g: usize,
    pub eta: f64,
    pub max_len: usize,
}

/// `max(1, ⌊eta · len⌋)`, never more than `len`.
///
/// The product gets a 1e-9 guard so that decimal proportions floor the way
/// they read (0.29 · 100 is 28.999999999999996 in binary).
pub fn retained_len(eta: f64, len: usize) -> usize {
    let floor = (eta * len as f64 + 1e-9).floor() as usize;
    floor.max(1).min(len)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(Error::EtaOutOfRange(eta))
    }
}

pub fn extract_prefix(rollout: &Rollout, eta: f64) -> Result<&[Token]> {
    check_eta(eta)?;
    if rollout.generated.is_empty() {
        return Err(Error::Config("cannot take a prefix of an empty rollout".into()));
    }
    Ok(&rollout.generated[..retained_len(eta, rollout.generated.len())])
}

pub fn sample_group(
    old: &PolicyParams,
    vocab: &Vocab,
    instance: &TaskInstance,
    n: usize,
    max_len: usize,
    streams: SeedStream,
) -> Result<Vec<Rollout>> {
    if n < 2 {
        return Err(Error::DegenerateGroup(n));
    }
    if max_len < 2 {
        return Err(Error::Config(format!("max_len must be at least 2, got {max_len}")));
    }
    check_inputs(old, vocab, &instance.prompt)?;
    let mut scratch = Scratch::default();
    Ok((0..n as u64)
        .map(|i| {
            let g = sample_unchecked(
                old,
                &instance.prompt,
                &[],
                vocab.eos(),
                max_len,
                &mut streams.child(i).rng(),
                &mut scratch,
            );
            Rollout {
                instance_id: instance.id,
                generated: g.tokens,
                old_logprobs: g.logprobs,
                terminated_by_eos: g.terminated_by_eos,
            }
        })
        .collect())
}

fn check_inputs(params: &PolicyParams, vocab: &Vocab, prompt: &[Token]) -> Result<()> {
    if params.vocab_size() != vocab.size() {
        return Err(Error::Shape(format!(
            "policy vocabulary {} vs task vocabulary {}",
            params.vocab_size(),
            vocab.size()
        )));
    }
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    vocab.check(prompt)
}

/// `g` continuations of `prompt ⊕ prefix`, each excluding the prefix.
///
/// A prefix that already ends with EOS (or fills `max_len`) leaves nothing to
/// generate; its continuations are empty.
pub fn sample_continuations(
    old: &PolicyParams,
    vocab: &Vocab,
    instance: &TaskInstance,
    prefix: &[Token],
    g: usize,
    max_len: usize,
    streams: SeedStream,
) -> Result<Vec<Vec<Token>>> {
    if g == 0 {
        return Err(Error::Config("at least one continuation is required".into()));
    }
    check_inputs(old, vocab, &instance.prompt)?;
    vocab.check(prefix)?;
    let remaining = max_len.saturating_sub(prefix.len());
    if prefix.last() == Some(&vocab.eos()) || remaining == 0 {
        return Ok(vec![Vec::new(); g]);
    }
    let mut scratch = Scratch::default();
    Ok((0..g as u64)
        .map(|j| {
            sample_unchecked(
                old,
                &instance.prompt,
                prefix,
                vocab.eos(),
                remaining,
                &mut streams.child(j).rng(),
                &mut scratch,
            )
            .tokens
        })
        .collect())
}

/// Correct continuations (each judged on `prefix ⊕ continuation`) plus the
/// correctness of the original output.
pub fn accumulated_reward(
    vocab: &Vocab,
    instance: &TaskInstance,
    continuations: &[Vec<Token>],
    source: &Rollout,
    prefix: &[Token],
) -> u32 {
    let mut full = Vec::new();
    let from_continuations = continuations
        .iter()
        .filter(|c| {
            full.clear();
            full.extend_from_slice(prefix);
            full.extend_from_slice(c);
            verify_correct(vocab, &full, instance)
        })
        .count() as u32;
    from_continuations + u32::from(verify_correct(vocab, &source.generated, instance))
}

/// Samples `plan.n` originals and, for each, `plan.g` continuations from its
/// retained prefix. With `plan.g == 0` the reward is the original's
/// correctness alone.
pub fn build_prefix_groups(
    old: &PolicyParams,
    vocab: &Vocab,
    instance: &TaskInstance,
    plan: GroupPlan,
    reward: &RewardConfig,
    streams: SeedStream,
) -> Result<Vec<PrefixGroup>> {
    check_eta(plan.eta)?;
    let rollouts = sample_group(old, vocab, instance, plan.n, plan.max_len, streams.named("orig"))?;
    let cont = streams.named("cont");
    rollouts
        .into_iter()
        .enumerate()
        .map(|(i, source)| {
            let prefix = extract_prefix(&source, plan.eta)?.to_vec();
            let continuations = if plan.g == 0 {
                Vec::new()
            } else {
                sample_continuations(old, vocab, instance, &prefix, plan.g, plan.max_len, cont.child(i as u64))?
            };
            let r = accumulated_reward(vocab, instance, &continuations, &source, &prefix);
            let format_bonus = if reward.format_weight != 0.0 {
                reward.format_weight * f64::from(u8::from(verify_format(vocab, &source.generated, &reward.format_rule)))
            } else {
                0.0
            };
            Ok(PrefixGroup {
                source_correct: verify_correct(vocab, &source.generated, instance),
                source,
                prefix,
                continuations,
                reward: r,
                format_bonus,
                eta_used: plan.eta,
            })
        })
        .collect()
}

/// [`build_prefix_groups`] for many instances on the rayon pool; results are
/// returned in input order.
pub fn build_batch_groups(
    old: &PolicyParams,
    vocab: &Vocab,
    instances: &[TaskInstance],
    plan: GroupPlan,
    reward: &RewardConfig,
    streams: SeedStream,
) -> Result<Vec<Vec<PrefixGroup>>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(k, inst)| build_prefix_groups(old, vocab, inst, plan, reward, streams.child(k as u64)))
        .collect()
}
