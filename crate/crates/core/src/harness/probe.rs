//! Prefix probes on the internal policy.
//!
//! For each instance, full outputs are rejection-sampled until the requested
//! number of correct and incorrect ones are in hand. A prefix of each is
//! fixed and `g` continuations are sampled from it. Three accuracies come
//! out: unconditioned, after a correct prefix, and after an incorrect prefix.
//! Every verdict is kept in the report so all figures can be recounted.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_unchecked, PolicyParams, Scratch};
use crate::rng::SeedStream;
use crate::rollout::retained_len;
use crate::tasks::{verify_correct, TaskInstance, Token, Vocab};

/// What to do when an instance does not yield enough outputs of a kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shortfall {
    #[default]
    Error,
    /// Leave the instance out and list it in the report.
    Skip,
}

/// How a proportion becomes a prefix length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefixRule {
    /// `max(1, ⌊eta·len⌋)`, as in training.
    #[default]
    Lifted,
    /// `⌊eta·len⌋`; may be empty.
    Exact,
}

impl PrefixRule {
    pub fn len(self, eta: f64, output_len: usize) -> usize {
        match self {
            PrefixRule::Lifted => retained_len(eta, output_len),
            PrefixRule::Exact => ((eta * output_len as f64 + 1e-9).floor() as usize).min(output_len),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub eta: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub g: usize,
    pub max_len: usize,
    /// Sampling attempts allowed per needed output.
    pub attempts_per_output: usize,
    pub shortfall: Shortfall,
    pub prefix_rule: PrefixRule,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            eta: 0.15,
            n_correct: 4,
            n_incorrect: 4,
            g: 8,
            max_len: 24,
            attempts_per_output: 64,
            shortfall: Shortfall::Error,
            prefix_rule: PrefixRule::Lifted,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::EtaOutOfRange(self.eta));
        }
        if self.g == 0 || self.max_len == 0 || self.attempts_per_output == 0 {
            return Err(Error::Config("g, max_len and attempts_per_output must be positive".into()));
        }
        if self.n_correct + self.n_incorrect == 0 {
            return Err(Error::Config("nothing to collect".into()));
        }
        Ok(())
    }
}

/// Accuracy of one arm with a 95% interval over prefixes (each prefix's
/// continuations are one cluster).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub prefixes: usize,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub std_err: f64,
    pub ci95: [f64; 2],
}

impl ArmStats {
    pub fn from_verdicts<'a>(clusters: impl IntoIterator<Item = &'a [bool]>) -> Self {
        let per: Vec<(usize, usize)> =
            clusters.into_iter().map(|c| (c.iter().filter(|&&v| v).count(), c.len())).collect();
        let samples: usize = per.iter().map(|p| p.1).sum();
        let correct: usize = per.iter().map(|p| p.0).sum();
        let accuracy = if samples == 0 { 0.0 } else { correct as f64 / samples as f64 };
        let m = per.len();
        let std_err = if m < 2 {
            0.0
        } else {
            let rates: Vec<f64> = per.iter().map(|&(c, n)| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect();
            let mean = rates.iter().sum::<f64>() / m as f64;
            let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            (var / m as f64).sqrt()
        };
        ArmStats {
            prefixes: m,
            samples,
            correct,
            accuracy,
            std_err,
            ci95: [(accuracy - 1.96 * std_err).max(0.0), (accuracy + 1.96 * std_err).min(1.0)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Baseline,
    CorrectPrefix,
    IncorrectPrefix,
}

/// One prefix and the verdicts of its continuations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixRecord {
    pub instance_id: u64,
    pub arm: Arm,
    pub prefix: Vec<Token>,
    pub verdicts: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub config: ProbeConfig,
    pub baseline: ArmStats,
    pub correct_prefix: ArmStats,
    pub incorrect_prefix: ArmStats,
    pub instances_used: usize,
    pub skipped_instances: Vec<u64>,
    pub collection_attempts: usize,
    pub records: Vec<PrefixRecord>,
}

impl ProbeReport {
    pub fn arm_stats(records: &[PrefixRecord], arm: Arm) -> ArmStats {
        ArmStats::from_verdicts(records.iter().filter(|r| r.arm == arm).map(|r| r.verdicts.as_slice()))
    }
}

/// Outputs collected for one instance.
#[derive(Clone, Debug)]
pub struct Collected {
    pub instance: TaskInstance,
    pub correct: Vec<Vec<Token>>,
    pub incorrect: Vec<Vec<Token>>,
    pub attempts: usize,
}

fn sample(
    params: &PolicyParams,
    vocab: &Vocab,
    inst: &TaskInstance,
    prefix: &[Token],
    max_len: usize,
    s: SeedStream,
    scratch: &mut Scratch,
) -> Vec<Token> {
    let remaining = max_len.saturating_sub(prefix.len());
    if prefix.last() == Some(&vocab.eos()) || remaining == 0 {
        return Vec::new();
    }
    sample_unchecked(params, &inst.prompt, prefix, vocab.eos(), remaining, &mut s.rng(), scratch).tokens
}

/// Rejection-samples up to `cfg.n_correct` correct and `cfg.n_incorrect`
/// incorrect outputs within `attempts_per_output · (n_correct + n_incorrect)`
/// draws. Returns what was found; the caller decides about shortfalls.
pub fn collect_outputs(
    params: &PolicyParams,
    vocab: &Vocab,
    inst: &TaskInstance,
    cfg: &ProbeConfig,
    streams: SeedStream,
) -> Collected {
    let budget = cfg.attempts_per_output * (cfg.n_correct + cfg.n_incorrect);
    let mut c = Collected { instance: inst.clone(), correct: Vec::new(), incorrect: Vec::new(), attempts: 0 };
    let mut scratch = Scratch::default();
    while c.attempts < budget && (c.correct.len() < cfg.n_correct || c.incorrect.len() < cfg.n_incorrect) {
        let out = sample(params, vocab, inst, &[], cfg.max_len, streams.child(c.attempts as u64), &mut scratch);
        c.attempts += 1;
        if out.is_empty() {
            continue;
        }
        if verify_correct(vocab, &out, inst) {
            if c.correct.len() < cfg.n_correct {
                c.correct.push(out);
            }
        } else if c.incorrect.len() < cfg.n_incorrect {
            c.incorrect.push(out);
        }
    }
    c
}

fn shortfall_error(c: &Collected, cfg: &ProbeConfig) -> Error {
    Error::ProbeShortfall {
        instance_id: c.instance.id,
        wanted_correct: cfg.n_correct,
        wanted_incorrect: cfg.n_incorrect,
        got_correct: c.correct.len(),
        got_incorrect: c.incorrect.len(),
        attempts: c.attempts,
    }
}

/// `g` continuation verdicts for `prefix`, judged on `prefix ⊕ continuation`.
pub fn continuation_verdicts(
    params: &PolicyParams,
    vocab: &Vocab,
    inst: &TaskInstance,
    prefix: &[Token],
    g: usize,
    max_len: usize,
    streams: SeedStream,
) -> Vec<bool> {
    let mut scratch = Scratch::default();
    let mut full = Vec::new();
    (0..g as u64)
        .map(|j| {
            let cont = sample(params, vocab, inst, prefix, max_len, streams.child(j), &mut scratch);
            full.clear();
            full.extend_from_slice(prefix);
            full.extend_from_slice(&cont);
            verify_correct(vocab, &full, inst)
        })
        .collect()
}

/// Collects outputs for every instance, applying the shortfall policy.
pub fn collect_all(
    params: &PolicyParams,
    vocab: &Vocab,
    dataset: &[TaskInstance],
    cfg: &ProbeConfig,
    streams: SeedStream,
) -> Result<(Vec<Collected>, Vec<u64>, usize)> {
    cfg.validate()?;
    for inst in dataset {
        if inst.prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        params.check_tokens(&inst.prompt)?;
    }
    let collected: Vec<Collected> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, inst)| collect_outputs(params, vocab, inst, cfg, streams.child(i as u64)))
        .collect();
    let attempts = collected.iter().map(|c| c.attempts).sum();
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for c in collected {
        if c.correct.len() == cfg.n_correct && c.incorrect.len() == cfg.n_incorrect {
            kept.push(c);
        } else if cfg.shortfall == Shortfall::Error {
            return Err(shortfall_error(&c, cfg));
        } else {
            skipped.push(c.instance.id);
        }
    }
    Ok((kept, skipped, attempts))
}

fn arm_records(
    params: &PolicyParams,
    vocab: &Vocab,
    kept: &[Collected],
    cfg: &ProbeConfig,
    eta: f64,
    streams: SeedStream,
) -> Vec<PrefixRecord> {
    kept.par_iter()
        .enumerate()
        .flat_map_iter(|(i, c)| {
            let s = streams.child(i as u64);
            let mut recs = Vec::new();
            // Baseline: as many empty-prefix clusters as correct-prefix ones.
            for b in 0..cfg.n_correct.max(1) {
                let verdicts = continuation_verdicts(
                    params,
                    vocab,
                    &c.instance,
                    &[],
                    cfg.g,
                    cfg.max_len,
                    s.named("none").child(b as u64),
                );
                recs.push(PrefixRecord {
                    instance_id: c.instance.id,
                    arm: Arm::Baseline,
                    prefix: Vec::new(),
                    verdicts,
                });
            }
            for (arm, outs, label) in
                [(Arm::CorrectPrefix, &c.correct, "pos"), (Arm::IncorrectPrefix, &c.incorrect, "neg")]
            {
                for (o, out) in outs.iter().enumerate() {
                    let prefix = out[..cfg.prefix_rule.len(eta, out.len())].to_vec();
                    let verdicts = continuation_verdicts(
                        params,
                        vocab,
                        &c.instance,
                        &prefix,
                        cfg.g,
                        cfg.max_len,
                        s.named(label).child(o as u64),
                    );
                    recs.push(PrefixRecord { instance_id: c.instance.id, arm, prefix, verdicts });
                }
            }
            recs
        })
        .collect()
}

pub fn ble_probe(
    params: &PolicyParams,
    vocab: &Vocab,
    dataset: &[TaskInstance],
    cfg: &ProbeConfig,
    streams: SeedStream,
) -> Result<ProbeReport> {
    let (kept, skipped_instances, collection_attempts) =
        collect_all(params, vocab, dataset, cfg, streams.named("collect"))?;
    let records = arm_records(params, vocab, &kept, cfg, cfg.eta, streams.named("continue"));
    Ok(ProbeReport {
        config: *cfg,
        baseline: ProbeReport::arm_stats(&records, Arm::Baseline),
        correct_prefix: ProbeReport::arm_stats(&records, Arm::CorrectPrefix),
        incorrect_prefix: ProbeReport::arm_stats(&records, Arm::IncorrectPrefix),
        instances_used: kept.len(),
        skipped_instances,
        collection_attempts,
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionArm {
    pub token: Token,
    pub symbol: String,
    pub stats: ArmStats,
    /// Accuracy with the token minus accuracy without it.
    pub recovery: f64,
    pub records: Vec<PrefixRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub without: ArmStats,
    pub without_records: Vec<PrefixRecord>,
    pub with: Vec<InterventionArm>,
}

/// Conditioned accuracy after each incorrect prefix, with and without each
/// reflection token appended.
pub fn ble_intervention(
    params: &PolicyParams,
    vocab: &Vocab,
    incorrect_prefixes: &[(TaskInstance, Vec<Token>)],
    reflection: &[Token],
    g: usize,
    max_len: usize,
    streams: SeedStream,
) -> Result<InterventionReport> {
    vocab.check(reflection)?;
    if g == 0 {
        return Err(Error::Config("g must be positive".into()));
    }
    let run = |extra: Option<Token>, s: SeedStream| -> Vec<PrefixRecord> {
        incorrect_prefixes
            .par_iter()
            .enumerate()
            .map(|(i, (inst, prefix))| {
                let mut p = prefix.clone();
                p.extend(extra);
                let verdicts = continuation_verdicts(params, vocab, inst, &p, g, max_len, s.child(i as u64));
                PrefixRecord { instance_id: inst.id, arm: Arm::IncorrectPrefix, prefix: p, verdicts }
            })
            .collect()
    };
    let without_records = run(None, streams.named("without"));
    let without = ProbeReport::arm_stats(&without_records, Arm::IncorrectPrefix);
    let with = reflection
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let records = run(Some(t), streams.named("with").child(k as u64));
            let stats = ProbeReport::arm_stats(&records, Arm::IncorrectPrefix);
            InterventionArm {
                token: t,
                symbol: vocab.symbol(t).unwrap_or("?").to_string(),
                recovery: stats.accuracy - without.accuracy,
                stats,
                records,
            }
        })
        .collect();
    Ok(InterventionReport { without, without_records, with })
}

/// Incorrect-output prefixes from a probe report, for [`ble_intervention`].
pub fn incorrect_prefixes(report: &ProbeReport, dataset: &[TaskInstance]) -> Vec<(TaskInstance, Vec<Token>)> {
    report
        .records
        .iter()
        .filter(|r| r.arm == Arm::IncorrectPrefix)
        .filter_map(|r| dataset.iter().find(|i| i.id == r.instance_id).map(|i| (i.clone(), r.prefix.clone())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub etas: Vec<f64>,
    pub correct_prefix_acc: Vec<f64>,
    pub incorrect_prefix_acc: Vec<f64>,
    pub gap: Vec<f64>,
    pub prefixes_per_arm: Vec<usize>,
    pub baseline_acc: f64,
    pub prefix_rule: PrefixRule,
    pub instances_used: usize,
    pub skipped_instances: Vec<u64>,
}

pub const DEFAULT_SWEEP: [f64; 10] = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50];

/// One collection, then continuations at every `eta`.
pub fn eta_sweep(
    params: &PolicyParams,
    vocab: &Vocab,
    dataset: &[TaskInstance],
    etas: &[f64],
    cfg: &ProbeConfig,
    streams: SeedStream,
) -> Result<SweepReport> {
    if etas.is_empty() || etas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("etas must be nonempty and strictly ascending".into()));
    }
    if let Some(&bad) = etas.iter().find(|&&e| !(e > 0.0 && e <= 1.0)) {
        return Err(Error::EtaOutOfRange(bad));
    }
    let (kept, skipped_instances, _) = collect_all(params, vocab, dataset, cfg, streams.named("collect"))?;
    let mut report = SweepReport {
        etas: etas.to_vec(),
        correct_prefix_acc: Vec::new(),
        incorrect_prefix_acc: Vec::new(),
        gap: Vec::new(),
        prefixes_per_arm: Vec::new(),
        baseline_acc: 0.0,
        prefix_rule: cfg.prefix_rule,
        instances_used: kept.len(),
        skipped_instances,
    };
    for (k, &eta) in etas.iter().enumerate() {
        let records = arm_records(params, vocab, &kept, cfg, eta, streams.named("continue").child(k as u64));
        let pos = ProbeReport::arm_stats(&records, Arm::CorrectPrefix);
        let neg = ProbeReport::arm_stats(&records, Arm::IncorrectPrefix);
        if k == 0 {
            report.baseline_acc = ProbeReport::arm_stats(&records, Arm::Baseline).accuracy;
        }
        report.gap.push(pos.accuracy - neg.accuracy);
        report.prefixes_per_arm.push(pos.prefixes.min(neg.prefixes));
        report.correct_prefix_acc.push(pos.accuracy);
        report.incorrect_prefix_acc.push(neg.accuracy);
    }
    Ok(report)
}
