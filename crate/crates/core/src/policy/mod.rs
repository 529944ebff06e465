//! Linear-softmax autoregressive policy over a fixed window of left context.
//!
//! `P(t | context) = softmax_t( Σ_{f ∈ active(context)} W[f, t] )`
//!
//! The active features of a context are a bias row, one row per
//! (offset, token) pair in the last `k` tokens, and hashed rows keyed on
//! conjunctions of window positions: every subset of 2 to
//! `conjunction_order` offsets, plus the whole window. All features are
//! binary, so the gradient of `log P(t | context)` with respect to row `f` is
//! `onehot(t) - P(· | context)` for every active `f` and zero elsewhere.

mod checkpoint;

use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::Token;

pub use checkpoint::{read_params, write_params, CHECKPOINT_VERSION};

/// Describes how a context window is turned into active weight rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub vocab_size: usize,
    pub context_order: usize,
    pub hash_bits: u32,
    /// Largest offset subset hashed as a conjunction (besides the full window).
    pub conjunction_order: usize,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl FeatureMap {
    /// Identifier of the window-unigram + hashed-conjunction map, stored in checkpoints.
    pub const ID: u32 = 1;
    pub const MAX_HASH_BITS: u32 = 24;
    pub const MAX_CONTEXT_ORDER: usize = 16;

    /// A map whose only conjunction is the full window.
    pub fn new(vocab_size: usize, context_order: usize, hash_bits: u32) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config(format!("vocabulary of {vocab_size} tokens")));
        }
        if context_order == 0 || context_order > Self::MAX_CONTEXT_ORDER {
            return Err(Error::Config(format!(
                "context order must be in 1..={}, got {context_order}",
                Self::MAX_CONTEXT_ORDER
            )));
        }
        if hash_bits > Self::MAX_HASH_BITS {
            return Err(Error::Config(format!("hash_bits {hash_bits} exceeds {}", Self::MAX_HASH_BITS)));
        }
        Ok(FeatureMap { vocab_size, context_order, hash_bits, conjunction_order: 1 })
    }

    pub fn with_conjunctions(self, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("conjunction order must be at least 1".into()));
        }
        Ok(FeatureMap { conjunction_order: order, ..self })
    }

    /// Order-3 window, pairwise conjunctions, 2^12 buckets.
    pub fn with_defaults(vocab_size: usize) -> Result<Self> {
        Self::new(vocab_size, 3, 12)?.with_conjunctions(2)
    }

    fn unigram_base(&self) -> usize {
        1
    }

    fn joint_base(&self) -> usize {
        1 + self.context_order * (self.vocab_size + 1)
    }

    pub fn buckets(&self) -> usize {
        1usize << self.hash_bits
    }

    pub fn feature_dim(&self) -> usize {
        self.joint_base() + self.buckets()
    }

    fn hashed(&self, mask: u32) -> bool {
        let full = (1u32 << self.context_order) - 1;
        let c = mask.count_ones() as usize;
        mask == full || (2..=self.conjunction_order).contains(&c)
    }

    pub fn active_count(&self) -> usize {
        let hashed = (1..1u32 << self.context_order).filter(|&m| self.hashed(m)).count();
        1 + self.context_order + hashed
    }

    /// Writes the active rows of `context` into `out`.
    ///
    /// Offsets before the start of the context read a padding symbol with
    /// id `vocab_size`. Every token must already be inside the vocabulary.
    pub fn active_features(&self, context: &[Token], out: &mut Vec<usize>) {
        out.clear();
        out.push(0);
        let k = self.context_order;
        let stride = self.vocab_size + 1;
        let mut window = [0u64; Self::MAX_CONTEXT_ORDER];
        for (offset, slot) in window.iter_mut().enumerate().take(k) {
            let tok = context.len().checked_sub(offset + 1).map_or(self.vocab_size, |i| context[i].index());
            out.push(self.unigram_base() + offset * stride + tok);
            *slot = tok as u64;
        }
        let mask_bits = (self.buckets() - 1) as u64;
        for m in 1..1u32 << k {
            if !self.hashed(m) {
                continue;
            }
            let mut h = mix(u64::from(m).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut bits = m;
            while bits != 0 {
                let offset = bits.trailing_zeros() as usize;
                h = mix(h ^ window[offset].wrapping_add(0x2545_F491_4F6C_DD1D));
                bits &= bits - 1;
            }
            out.push(self.joint_base() + (h & mask_bits) as usize);
        }
    }
}

/// Weights of the policy, row-major `feature_dim × vocab_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    map: FeatureMap,
    weights: Vec<f64>,
}

/// A probability vector over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn prob(&self, t: Token) -> f64 {
        self.probs[t.index()]
    }
}

/// A dense gradient with the same shape as [`PolicyParams`] weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        GradientVector(vec![0.0; len])
    }

    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self::zeros(params.weights.len())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &GradientVector) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Shape(format!("gradient {} vs {}", self.len(), other.len())));
        }
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        self.0.iter().zip(&other.0).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Tokens produced by one autoregressive sampling pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<Token>,
    /// `log P(tokens[j] | context)` under the sampling parameters.
    pub logprobs: Vec<f64>,
    pub terminated_by_eos: bool,
}

/// Reusable buffers for hot loops.
#[derive(Default)]
pub(crate) struct Scratch {
    feats: Vec<usize>,
    pub(crate) logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(map: FeatureMap) -> Self {
        PolicyParams { weights: vec![0.0; map.feature_dim() * map.vocab_size], map }
    }

    pub fn from_weights(map: FeatureMap, weights: Vec<f64>) -> Result<Self> {
        let want = map.feature_dim() * map.vocab_size;
        if weights.len() != want {
            return Err(Error::Shape(format!("expected {want} weights, got {}", weights.len())));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Numerical(format!("weight {i} is not finite")));
        }
        Ok(PolicyParams { map, weights })
    }

    /// Independent normal-ish entries (sum of uniforms) with the given scale.
    pub fn random<R: Rng + ?Sized>(map: FeatureMap, scale: f64, rng: &mut R) -> Self {
        let n = map.feature_dim() * map.vocab_size;
        let weights = (0..n)
            .map(|_| {
                let s: f64 = (0..4).map(|_| rng.gen::<f64>()).sum();
                (s - 2.0) * scale * 3f64.sqrt()
            })
            .collect();
        PolicyParams { map, weights }
    }

    pub fn map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn vocab_size(&self) -> usize {
        self.map.vocab_size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mutable access for in-place optimizers (backbone warm start).
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn row(&self, feature: usize) -> &[f64] {
        let v = self.map.vocab_size;
        &self.weights[feature * v..(feature + 1) * v]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub(crate) fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| t.index() >= self.map.vocab_size) {
            Some(t) => Err(Error::UnknownToken { id: t.0, vocab_size: self.map.vocab_size }),
            None => Ok(()),
        }
    }

    /// Fills `scratch.logits`; returns log Σ exp(logits).
    pub(crate) fn logits_into(&self, context: &[Token], scratch: &mut Scratch) -> f64 {
        let v = self.map.vocab_size;
        self.map.active_features(context, &mut scratch.feats);
        scratch.logits.clear();
        scratch.logits.resize(v, 0.0);
        for &f in &scratch.feats {
            let row = &self.weights[f * v..(f + 1) * v];
            scratch.logits.iter_mut().zip(row).for_each(|(l, w)| *l += w);
        }
        let max = scratch.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scratch.logits.iter().map(|l| (l - max).exp()).sum();
        max + sum.ln()
    }

    /// Adds `scale · ∇ log P(token | context)` into `grad`; returns the log-probability.
    pub(crate) fn accumulate_logprob_grad(
        &self,
        context: &[Token],
        token: Token,
        scale: f64,
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) -> f64 {
        let lse = self.logits_into(context, scratch);
        self.add_grad_from_logits(token, lse, scale, grad, scratch);
        scratch.logits[token.index()] - lse
    }

    /// Second half of [`Self::accumulate_logprob_grad`] for callers that need
    /// the log-probability before choosing `scale`. Expects `scratch` as left
    /// by [`Self::logits_into`]; clobbers the logits.
    pub(crate) fn add_grad_from_logits(
        &self,
        token: Token,
        lse: f64,
        scale: f64,
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) {
        if scale == 0.0 {
            return;
        }
        let v = self.map.vocab_size;
        // logits buffer becomes -scale · P(t)
        for l in scratch.logits.iter_mut() {
            *l = -scale * (*l - lse).exp();
        }
        scratch.logits[token.index()] += scale;
        for &f in &scratch.feats {
            let row = &mut grad[f * v..(f + 1) * v];
            row.iter_mut().zip(&scratch.logits).for_each(|(g, d)| *g += d);
        }
    }

    /// In-place `W += step · ∇ log P(token | context)`; returns the
    /// log-probability before the step.
    pub(crate) fn ascend_logprob(&mut self, context: &[Token], token: Token, step: f64, scratch: &mut Scratch) -> f64 {
        let lse = self.logits_into(context, scratch);
        let logprob = scratch.logits[token.index()] - lse;
        let v = self.map.vocab_size;
        for l in scratch.logits.iter_mut() {
            *l = -step * (*l - lse).exp();
        }
        scratch.logits[token.index()] += step;
        for &f in &scratch.feats {
            let row = &mut self.weights[f * v..(f + 1) * v];
            row.iter_mut().zip(&scratch.logits).for_each(|(w, d)| *w += d);
        }
        logprob
    }

    /// In-place `W += step · ∇ Σ_t q_t log P(t | context)` for a target
    /// distribution `q` given as (token, mass) pairs summing to 1.
    pub(crate) fn ascend_soft_target(
        &mut self,
        context: &[Token],
        target: &[(Token, f64)],
        step: f64,
        scratch: &mut Scratch,
    ) {
        let lse = self.logits_into(context, scratch);
        let v = self.map.vocab_size;
        for l in scratch.logits.iter_mut() {
            *l = -step * (*l - lse).exp();
        }
        for &(t, q) in target {
            scratch.logits[t.index()] += step * q;
        }
        for &f in &scratch.feats {
            let row = &mut self.weights[f * v..(f + 1) * v];
            row.iter_mut().zip(&scratch.logits).for_each(|(w, d)| *w += d);
        }
    }

    pub(crate) fn logprob_unchecked(&self, context: &[Token], token: Token, scratch: &mut Scratch) -> f64 {
        let lse = self.logits_into(context, scratch);
        scratch.logits[token.index()] - lse
    }
}

/// Next-token distribution given the full left context.
pub fn token_distribution(params: &PolicyParams, context: &[Token]) -> Result<TokenDistribution> {
    params.check_tokens(context)?;
    let mut scratch = Scratch::default();
    let lse = params.logits_into(context, &mut scratch);
    Ok(TokenDistribution { probs: scratch.logits.iter().map(|l| (l - lse).exp()).collect() })
}

/// Samples after `prompt ⊕ prefix` until EOS or `max_len` generated tokens.
/// Prefix tokens are context only and are not part of the returned tokens.
pub fn sample_sequence<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[Token],
    prefix: Option<&[Token]>,
    eos: Token,
    max_len: usize,
    rng: &mut R,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let prefix = prefix.unwrap_or(&[]);
    params.check_tokens(prompt)?;
    params.check_tokens(prefix)?;
    params.check_tokens(&[eos])?;
    let mut scratch = Scratch::default();
    Ok(sample_unchecked(params, prompt, prefix, eos, max_len, rng, &mut scratch))
}

pub(crate) fn sample_unchecked<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[Token],
    prefix: &[Token],
    eos: Token,
    max_len: usize,
    rng: &mut R,
    scratch: &mut Scratch,
) -> Generation {
    let mut context = Vec::with_capacity(prompt.len() + prefix.len() + max_len);
    context.extend_from_slice(prompt);
    context.extend_from_slice(prefix);
    let mut tokens = Vec::with_capacity(max_len);
    let mut logprobs = Vec::with_capacity(max_len);
    let mut terminated_by_eos = false;
    while tokens.len() < max_len {
        let lse = params.logits_into(&context, scratch);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = scratch.logits.len() - 1;
        for (i, l) in scratch.logits.iter().enumerate() {
            acc += (l - lse).exp();
            if u < acc {
                chosen = i;
                break;
            }
        }
        let t = Token(chosen as u32);
        logprobs.push(scratch.logits[chosen] - lse);
        tokens.push(t);
        context.push(t);
        if t == eos {
            terminated_by_eos = true;
            break;
        }
    }
    Generation { tokens, logprobs, terminated_by_eos }
}

/// `log P(generated_j | prompt ⊕ prefix ⊕ generated_<j)` for every j.
pub fn logprob_sequence(
    params: &PolicyParams,
    prompt: &[Token],
    prefix: Option<&[Token]>,
    generated: &[Token],
) -> Result<Vec<f64>> {
    let prefix = prefix.unwrap_or(&[]);
    for part in [prompt, prefix, generated] {
        params.check_tokens(part)?;
    }
    let mut context: Vec<Token> = prompt.iter().chain(prefix).copied().collect();
    let mut scratch = Scratch::default();
    Ok(generated
        .iter()
        .map(|&t| {
            let lp = params.logprob_unchecked(&context, t, &mut scratch);
            context.push(t);
            lp
        })
        .collect())
}

/// Exact gradient of `log P(token | context)` with respect to every weight.
pub fn grad_logprob_token(params: &PolicyParams, context: &[Token], token: Token) -> Result<GradientVector> {
    params.check_tokens(context)?;
    params.check_tokens(&[token])?;
    let mut grad = GradientVector::zeros_like(params);
    params.accumulate_logprob_grad(context, token, 1.0, &mut grad.0, &mut Scratch::default());
    Ok(grad)
}

/// Immutable copy of the policy used for sampling and ratio denominators.
///
/// There is no way to obtain `&mut PolicyParams` from a snapshot, so updates
/// to the live parameters can never reach it.
#[derive(Clone, Debug)]
pub struct Snapshot(Arc<PolicyParams>);

impl Deref for Snapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

pub fn snapshot(params: &PolicyParams) -> Snapshot {
    Snapshot(Arc::new(params.clone()))
}
