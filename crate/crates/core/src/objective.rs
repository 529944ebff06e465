//! The prefix-masked clipped surrogate, its exact gradient, the full-token
//! baseline, and the parameter update.
//!
//! ```text
//! J(θ) = 1/Σ_k|o_k| · Σ_i Σ_j H(j, o_i) · min(r_ij Â_i, clip(r_ij, 1-ε_low, 1+ε_high) Â_i)
//! r_ij = π_θ(o_ij | q, o_i,<j) / π_old(o_ij | q, o_i,<j)
//! ```
//!
//! A token whose min strictly selects the clipped branch contributes its
//! constant value to `J` and nothing to the gradient. Ties use the unclipped
//! branch. The trainer ascends `J`; logs report `-J` as the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{GradientVector, PolicyParams, Scratch, Snapshot};
use crate::rollout::{retained_len, PrefixGroup, Rollout};
use crate::tasks::{TaskInstance, Token};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub learning_rate: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { eps_low: 0.2, eps_high: 0.28, learning_rate: 1.0 }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return Err(Error::Config(format!("eps_low must be in (0, 1), got {}", self.eps_low)));
        }
        if !(self.eps_high > 0.0 && self.eps_high.is_finite()) {
            return Err(Error::Config(format!("eps_high must be positive, got {}", self.eps_high)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// What the objective divides by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalizer {
    /// Every original-output token in the batch, masked or not.
    #[default]
    AllTokens,
    /// Only the tokens the mask retains.
    RetainedTokens,
}

/// The groups sampled for one instance.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub instance: TaskInstance,
    pub groups: Vec<PrefixGroup>,
}

/// Everything one update consumes.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub items: Vec<BatchItem>,
    pub eta: f64,
    pub snapshot: Snapshot,
}

impl StepBatch {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for item in &self.items {
            if item.groups.len() < 2 {
                return Err(Error::DegenerateGroup(item.groups.len()));
            }
            for g in &item.groups {
                if g.eta_used != self.eta {
                    return Err(Error::Config(format!(
                        "group sampled at eta {} in a batch at eta {}",
                        g.eta_used, self.eta
                    )));
                }
                if g.source.generated.is_empty() || g.source.generated.len() != g.source.old_logprobs.len() {
                    return Err(Error::Shape("rollout tokens and log-probabilities disagree".into()));
                }
            }
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.items.iter().flat_map(|it| &it.groups).map(|g| g.source.generated.len()).sum()
    }
}

/// Per-rollout advantages and mask lengths, indexed `[item][group]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageTable {
    pub advantages: Vec<Vec<f64>>,
    /// Number of leading tokens with mask 1.
    pub retained: Vec<Vec<usize>>,
}

impl AdvantageTable {
    pub fn mask_bits(&self, item: usize, group: usize, len: usize) -> Vec<bool> {
        (0..len).map(|j| j < self.retained[item][group]).collect()
    }

    pub fn retained_total(&self) -> usize {
        self.retained.iter().flatten().sum()
    }
}

/// `(R_i - mean) / std` with the population standard deviation; all zeros
/// when every reward is equal.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::DegenerateGroup(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `H(j, o)` for a 1-based token index `j`: 1 iff `j ≤ max(1, ⌊eta·len⌋)`.
pub fn prefix_mask(j: usize, output_length: usize, eta: f64) -> bool {
    j >= 1 && j <= retained_len(eta, output_length)
}

/// `min(r·Â, clip(r, 1-ε_low, 1+ε_high)·Â)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// True when the min strictly prefers the clipped constant.
fn clip_active(ratio: f64, advantage: f64, clip: &ClipConfig) -> bool {
    let clipped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    clipped * advantage < ratio * advantage
}

/// `π_new / π_old` of generated token `position` (0-based), both re-scored.
pub fn importance_ratio(
    new: &PolicyParams,
    old: &PolicyParams,
    instance: &TaskInstance,
    rollout: &Rollout,
    position: usize,
) -> Result<f64> {
    let token = *rollout
        .generated
        .get(position)
        .ok_or_else(|| Error::Shape(format!("position {position} outside a rollout of {}", rollout.generated.len())))?;
    let context: Vec<Token> = instance.prompt.iter().chain(&rollout.generated[..position]).copied().collect();
    new.check_tokens(&context)?;
    new.check_tokens(&[token])?;
    let mut scratch = Scratch::default();
    let lp_new = new.logprob_unchecked(&context, token, &mut scratch);
    let lp_old = old.logprob_unchecked(&context, token, &mut scratch);
    finite_ratio(lp_new - lp_old)
}

fn finite_ratio(log_ratio: f64) -> Result<f64> {
    let r = log_ratio.exp();
    if r.is_finite() && r > 0.0 {
        Ok(r)
    } else {
        Err(Error::Numerical(format!("importance ratio exp({log_ratio}) is not a positive finite number")))
    }
}

/// Objective value, gradient, and token accounting for one batch.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub objective: f64,
    pub gradient: GradientVector,
    pub retained_tokens: usize,
    pub total_tokens: usize,
    pub clipped_tokens: usize,
}

/// Rewards are the groups' accumulated rewards, the mask keeps
/// `max(1, ⌊eta·|o_i|⌋)` leading tokens.
pub fn pppo_advantages(batch: &StepBatch) -> Result<AdvantageTable> {
    let mut advantages = Vec::with_capacity(batch.items.len());
    let mut retained = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        let rewards: Vec<f64> = item.groups.iter().map(PrefixGroup::total_reward).collect();
        advantages.push(group_advantages(&rewards)?);
        retained.push(item.groups.iter().map(|g| retained_len(batch.eta, g.source.generated.len())).collect());
    }
    Ok(AdvantageTable { advantages, retained })
}

/// Rewards are the originals' correctness, the mask keeps every token.
pub fn baseline_advantages(batch: &StepBatch) -> Result<AdvantageTable> {
    let mut advantages = Vec::with_capacity(batch.items.len());
    let mut retained = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        let rewards: Vec<f64> = item.groups.iter().map(|g| f64::from(u8::from(g.source_correct))).collect();
        advantages.push(group_advantages(&rewards)?);
        retained.push(item.groups.iter().map(|g| g.source.generated.len()).collect());
    }
    Ok(AdvantageTable { advantages, retained })
}

pub fn pppo_objective_and_gradient(batch: &StepBatch, live: &PolicyParams, clip: &ClipConfig) -> Result<Surrogate> {
    pppo_objective_with(batch, live, clip, Normalizer::AllTokens)
}

pub fn pppo_objective_with(
    batch: &StepBatch,
    live: &PolicyParams,
    clip: &ClipConfig,
    normalizer: Normalizer,
) -> Result<Surrogate> {
    batch.validate()?;
    let table = pppo_advantages(batch)?;
    surrogate(batch, &table, live, clip, normalizer)
}

pub fn baseline_full_token_objective(batch: &StepBatch, live: &PolicyParams, clip: &ClipConfig) -> Result<Surrogate> {
    batch.validate()?;
    let table = baseline_advantages(batch)?;
    surrogate(batch, &table, live, clip, Normalizer::AllTokens)
}

/// Evaluates the clipped surrogate for a precomputed table.
///
/// Tokens are visited in (item, group, position) order, so the result is
/// reproducible bit for bit.
pub fn surrogate(
    batch: &StepBatch,
    table: &AdvantageTable,
    live: &PolicyParams,
    clip: &ClipConfig,
    normalizer: Normalizer,
) -> Result<Surrogate> {
    batch.validate()?;
    clip.validate()?;
    if live.map() != batch.snapshot.map() {
        return Err(Error::Shape("live parameters and snapshot use different feature maps".into()));
    }
    let total_tokens = batch.total_tokens();
    let retained_tokens = table.retained_total();
    let denom = match normalizer {
        Normalizer::AllTokens => total_tokens,
        Normalizer::RetainedTokens => retained_tokens,
    } as f64;
    let mut gradient = GradientVector::zeros_like(live);
    let mut sum = 0.0;
    let mut clipped_tokens = 0;
    let mut scratch = Scratch::default();
    let mut context = Vec::new();
    for (ii, item) in batch.items.iter().enumerate() {
        live.check_tokens(&item.instance.prompt)?;
        for (gi, group) in item.groups.iter().enumerate() {
            let adv = table.advantages[ii][gi];
            if adv == 0.0 {
                continue;
            }
            let out = &group.source;
            live.check_tokens(&out.generated)?;
            context.clear();
            context.extend_from_slice(&item.instance.prompt);
            for j in 0..table.retained[ii][gi] {
                let token = out.generated[j];
                let lse = live.logits_into(&context, &mut scratch);
                let lp = scratch.logits[token.index()] - lse;
                let r = finite_ratio(lp - out.old_logprobs[j])?;
                sum += clipped_term(r, adv, clip);
                if clip_active(r, adv, clip) {
                    clipped_tokens += 1;
                } else {
                    live.add_grad_from_logits(token, lse, r * adv / denom, gradient.as_mut_slice(), &mut scratch);
                }
                context.push(token);
            }
        }
    }
    let objective = sum / denom;
    if !objective.is_finite() || !gradient.is_finite() {
        return Err(Error::Numerical("objective or gradient is not finite".into()));
    }
    Ok(Surrogate { objective, gradient, retained_tokens, total_tokens, clipped_tokens })
}

/// `θ ← θ + lr·∇J`. Nothing is written unless every updated entry is finite.
pub fn apply_update(live: &mut PolicyParams, gradient: &GradientVector, learning_rate: f64) -> Result<()> {
    if gradient.len() != live.weights().len() {
        return Err(Error::Shape(format!("gradient {} vs weights {}", gradient.len(), live.weights().len())));
    }
    if learning_rate == 0.0 {
        return Ok(());
    }
    let g = gradient.as_slice();
    if let Some(i) = live.weights().iter().zip(g).position(|(w, d)| !(w + learning_rate * d).is_finite()) {
        return Err(Error::Numerical(format!("update makes weight {i} non-finite")));
    }
    live.weights_mut().iter_mut().zip(g).for_each(|(w, d)| *w += learning_rate * d);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{snapshot, token_distribution, FeatureMap};
    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[4.0, 0.0, 8.0, 4.0]).unwrap();
        let s = 2f64.sqrt();
        for (x, y) in a.iter().zip([0.0, -s, s, 0.0]) {
            assert!(close(*x, y, 1e-12));
        }
        assert_eq!(group_advantages(&[5.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(group_advantages(&[0.0, 9.0]).unwrap(), vec![-1.0, 1.0]);
        assert!(matches!(group_advantages(&[1.0]), Err(Error::DegenerateGroup(1))));
    }

    #[test]
    fn mask_examples() {
        assert!(prefix_mask(15, 100, 0.15));
        assert!(!prefix_mask(16, 100, 0.15));
        assert!((1..=40).all(|j| prefix_mask(j, 40, 1.0)));
        assert!(prefix_mask(1, 3, 0.15));
        assert!(!prefix_mask(2, 3, 0.15));
    }

    #[test]
    fn clip_examples() {
        let c = ClipConfig::default();
        assert_eq!(clipped_term(1.5, 1.0, &c), 1.28);
        assert_eq!(clipped_term(0.5, -1.0, &c), -0.8);
        assert_eq!(clipped_term(3.7, 0.0, &c), 0.0);
        assert!(clip_active(1.5, 1.0, &c));
        assert!(!clip_active(1.1, 1.0, &c));
        assert!(!clip_active(1.5, -1.0, &c));
    }

    #[test]
    fn doubled_probability_ratio() {
        // Bias row logits: old (0, ln 3) gives P(0) = 1/4, new (0, 0) gives 1/2.
        let map = FeatureMap::new(2, 1, 0).unwrap();
        let mut old = PolicyParams::zeros(map);
        let new = PolicyParams::zeros(map);
        old.weights_mut()[1] = 3f64.ln();
        let inst = TaskInstance { id: 0, prompt: vec![Token(1)], answer: vec![Token(0)], difficulty: 1 };
        let r = Rollout {
            instance_id: 0,
            generated: vec![Token(0)],
            old_logprobs: vec![0.25f64.ln()],
            terminated_by_eos: false,
        };
        assert!(close(importance_ratio(&new, &old, &inst, &r, 0).unwrap(), 2.0, 1e-12));
        assert_eq!(importance_ratio(&old, &old, &inst, &r, 0).unwrap(), 1.0);
    }

    #[test]
    fn ascent_raises_rewarded_token() {
        let map = FeatureMap::new(2, 1, 0).unwrap();
        let mut live = PolicyParams::zeros(map);
        let snap = snapshot(&live);
        let inst = TaskInstance { id: 0, prompt: vec![Token(1)], answer: vec![Token(0)], difficulty: 1 };
        let mk = |t: u32, reward: u32| PrefixGroup {
            source: Rollout {
                instance_id: 0,
                generated: vec![Token(t)],
                old_logprobs: vec![0.5f64.ln()],
                terminated_by_eos: false,
            },
            prefix: vec![Token(t)],
            continuations: vec![],
            reward,
            source_correct: reward > 0,
            format_bonus: 0.0,
            eta_used: 1.0,
        };
        let batch = StepBatch {
            items: vec![BatchItem { instance: inst, groups: vec![mk(0, 1), mk(1, 0)] }],
            eta: 1.0,
            snapshot: snap,
        };
        let s = pppo_objective_and_gradient(&batch, &live, &ClipConfig::default()).unwrap();
        assert_eq!(s.objective, 0.0);
        let before = token_distribution(&live, &[Token(1)]).unwrap().prob(Token(0));
        apply_update(&mut live, &s.gradient, 0.5).unwrap();
        let after = token_distribution(&live, &[Token(1)]).unwrap().prob(Token(0));
        assert!(after > before);
    }

    #[test]
    fn update_guards() {
        let map = FeatureMap::new(3, 1, 1).unwrap();
        let mut p = PolicyParams::zeros(map);
        let g = GradientVector::zeros_like(&p);
        apply_update(&mut p, &g, 1.0).unwrap();
        assert_eq!(p, PolicyParams::zeros(map));
        let mut bad = GradientVector::zeros_like(&p);
        bad.as_mut_slice()[0] = f64::INFINITY;
        let before = p.clone();
        assert!(matches!(apply_update(&mut p, &bad, 1.0), Err(Error::Numerical(_))));
        assert_eq!(p, before);
        assert!(apply_update(&mut p, &GradientVector::zeros(2), 1.0).is_err());
    }
}
