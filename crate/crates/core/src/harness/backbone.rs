//! Warm start for the policy.
//!
//! A zero-initialized policy almost never emits a well-formed answer, so the
//! training runs start from a "backbone" fitted by maximum likelihood on
//! reference solutions. Arithmetic instances contribute both strategies. The
//! first token (the strategy choice) is weighted `direct_share` for the
//! direct derivation and the rest for the expanded one, so the backbone
//! knows both but mostly commits to the error-prone one.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{FeatureMap, PolicyParams, Scratch};
use crate::rng::SeedStream;
use crate::tasks::{demonstrations, Expression, Strategy, TaskFamily, TaskInstance, TaskSpec, Token};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub direct_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneReport {
    pub demonstrations: usize,
    /// Mean log-likelihood of the derivation tokens (after the strategy
    /// token) over the last epoch.
    pub final_mean_logprob: f64,
}

/// A task spec matching `data`'s family and difficulty range, for drawing a
/// separate warm-start corpus.
pub fn corpus_spec_like(data: &[TaskInstance], count: usize, seed: u64) -> Result<TaskSpec> {
    let first = data.first().ok_or_else(|| Error::Config("empty dataset".into()))?;
    let family = if Expression::parse(&first.prompt).is_some_and(|e| e.steps() > 0) {
        TaskFamily::BranchingArithmetic
    } else {
        TaskFamily::CopyChain
    };
    let lo = data.iter().map(|i| i.difficulty).min().unwrap_or(1).max(1);
    let hi = data.iter().map(|i| i.difficulty).max().unwrap_or(1).max(lo);
    Ok(TaskSpec { family, count, difficulty: lo..=hi, seed })
}

/// Maximum-likelihood SGD over the demonstrations of `corpus`.
///
/// Each derivation is fitted token by token after its first token. The
/// first token of an instance with several strategies is fitted to the soft
/// target `{direct: direct_share, expanded: 1 - direct_share}`, once per
/// instance and epoch, so the strategy mix converges to the share instead of
/// following the shuffle order.
pub fn pretrain(
    params: &mut PolicyParams,
    corpus: &[TaskInstance],
    cfg: &BackboneConfig,
    streams: SeedStream,
) -> Result<BackboneReport> {
    let mut demos = Vec::with_capacity(corpus.len());
    let mut count = 0;
    for inst in corpus {
        params.check_tokens(&inst.prompt)?;
        let d = demonstrations(inst);
        for (_, tokens) in &d {
            params.check_tokens(tokens)?;
        }
        count += d.len();
        demos.push(d);
    }
    // Spread the strategy step over the active rows so one visit cannot overshoot.
    let first_step = cfg.learning_rate / params.map().active_count() as f64;
    let mut scratch = Scratch::default();
    let mut context = Vec::new();
    let mut final_mean_logprob = 0.0;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut streams.child(epoch as u64).rng());
        let (mut lp_sum, mut n_tokens) = (0.0, 0usize);
        for &i in &order {
            let prompt = &corpus[i].prompt;
            let target: Vec<(Token, f64)> = match demos[i].as_slice() {
                [(_, only)] => vec![(only[0], 1.0)],
                several => several
                    .iter()
                    .map(|(s, d)| {
                        let w = match s {
                            Strategy::Direct => cfg.direct_share,
                            Strategy::Expanded => 1.0 - cfg.direct_share,
                        };
                        (d[0], w)
                    })
                    .collect(),
            };
            params.ascend_soft_target(prompt, &target, first_step, &mut scratch);
            for (_, tokens) in &demos[i] {
                context.clear();
                context.extend_from_slice(prompt);
                context.push(tokens[0]);
                for &t in &tokens[1..] {
                    lp_sum += params.ascend_logprob(&context, t, cfg.learning_rate, &mut scratch);
                    n_tokens += 1;
                    context.push(t);
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::Numerical(format!("warm start diverged in epoch {epoch}")));
        }
        final_mean_logprob = if n_tokens > 0 { lp_sum / n_tokens as f64 } else { 0.0 };
    }
    Ok(BackboneReport { demonstrations: count, final_mean_logprob })
}

/// Zero parameters for `map`, warm-started on `corpus` when it is nonempty.
pub fn build_backbone(
    map: FeatureMap,
    corpus: &[TaskInstance],
    cfg: &BackboneConfig,
    streams: SeedStream,
) -> Result<(PolicyParams, Option<BackboneReport>)> {
    let mut params = PolicyParams::zeros(map);
    if corpus.is_empty() || cfg.epochs == 0 {
        return Ok((params, None));
    }
    let report = pretrain(&mut params, corpus, cfg, streams)?;
    Ok((params, Some(report)))
}
