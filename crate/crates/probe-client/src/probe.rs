//! The lock-in probe against a remote endpoint.
//!
//! Per problem: sample outputs until `n_correct` correct and `n_incorrect`
//! incorrect ones are in hand, cut each to its leading `eta` share, and ask
//! for `g` continuations of every prefix. The "none" arm asks for `g`
//! unconditioned samples `n_correct` times. Every figure in the report can be
//! recomputed from `records`.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use pppo::harness::probe::{Arm, ArmStats, Shortfall};
use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;

use crate::client::{Client, CompletionRecord, Injection};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    #[serde(default)]
    pub id: Option<String>,
    pub question: String,
    pub answer: String,
}

/// Reads one problem per line; blank lines are skipped and missing ids
/// become the line's position.
pub fn read_problems<R: BufRead>(r: R) -> Result<Vec<Problem>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut p: Problem = serde_json::from_str(&line)?;
        p.id.get_or_insert_with(|| out.len().to_string());
        out.push(p);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteProbeConfig {
    pub eta: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub g: usize,
    pub attempts_per_output: usize,
    pub shortfall: Shortfall,
}

impl Default for RemoteProbeConfig {
    fn default() -> Self {
        RemoteProbeConfig {
            eta: 0.15,
            n_correct: 4,
            n_incorrect: 4,
            g: 8,
            attempts_per_output: 64,
            shortfall: Shortfall::Error,
        }
    }
}

impl RemoteProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        if self.g == 0 || self.attempts_per_output == 0 || self.n_correct + self.n_incorrect == 0 {
            return Err(Error::Config("g, attempts_per_output and n_correct + n_incorrect must be positive".into()));
        }
        Ok(())
    }
}

/// What a prefix length was counted in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefixUnit {
    /// Tokens reported by the endpoint.
    Tokens,
    /// Whitespace-delimited words (the endpoint reported no tokens).
    Words,
}

/// `max(1, ⌊eta·n⌋)` leading units of an output, with the unit used.
pub fn cut_prefix(record: &CompletionRecord, eta: f64) -> (String, PrefixUnit) {
    let keep = |n: usize| ((eta * n as f64 + 1e-9).floor() as usize).max(1).min(n);
    if let Some(tokens) = record.tokens.as_ref().filter(|t| !t.is_empty()) {
        return (tokens[..keep(tokens.len())].concat(), PrefixUnit::Tokens);
    }
    let text = &record.continuation;
    let words: Vec<(usize, &str)> =
        text.split_whitespace().map(|w| (w.as_ptr() as usize - text.as_ptr() as usize + w.len(), w)).collect();
    if words.is_empty() {
        return (String::new(), PrefixUnit::Words);
    }
    (text[..words[keep(words.len()) - 1].0].to_string(), PrefixUnit::Words)
}

/// One prefix (or, for the "none" arm, one empty-prefix batch) and the ids of
/// its continuation records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub problem_id: String,
    pub arm: Arm,
    pub prefix: String,
    pub prefix_unit: Option<PrefixUnit>,
    pub source_request: Option<String>,
    pub request_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointSummary {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteProbeReport {
    pub endpoint: EndpointSummary,
    pub config: RemoteProbeConfig,
    pub baseline: ArmStats,
    pub correct_prefix: ArmStats,
    pub incorrect_prefix: ArmStats,
    pub problems_used: usize,
    pub skipped_problems: Vec<String>,
    /// Requests per injection mode, over every record.
    pub injection_counts: BTreeMap<Injection, usize>,
    pub prefixes_in_tokens: usize,
    pub prefixes_in_words: usize,
    pub clusters: Vec<Cluster>,
    /// Every completion, collection samples first, in request order.
    pub records: Vec<CompletionRecord>,
}

impl RemoteProbeReport {
    /// Arm statistics recomputed from the records alone.
    pub fn recount(&self, arm: Arm) -> ArmStats {
        let by_id: HashMap<&str, &CompletionRecord> = self.records.iter().map(|r| (r.request_id.as_str(), r)).collect();
        let verdicts: Vec<Vec<bool>> = self
            .clusters
            .iter()
            .filter(|c| c.arm == arm)
            .map(|c| c.request_ids.iter().map(|id| by_id[id.as_str()].verdict.is_correct()).collect())
            .collect();
        ArmStats::from_verdicts(verdicts.iter().map(Vec::as_slice))
    }
}

struct Job {
    id: String,
    question: String,
    prefix: String,
    gold: String,
}

/// Runs `jobs` through the client concurrently and returns records in job
/// order.
async fn run_jobs(client: &Client, jobs: Vec<Job>) -> Result<Vec<CompletionRecord>> {
    let mut set = JoinSet::new();
    for (k, job) in jobs.into_iter().enumerate() {
        let client = client.clone();
        set.spawn(async move {
            let seed = request_seed(&job.id);
            (k, client.complete(&job.id, &job.question, &job.prefix, &job.gold, seed).await)
        });
    }
    let mut out: Vec<Option<CompletionRecord>> = Vec::new();
    let mut first_err = None;
    while let Some(joined) = set.join_next().await {
        let (k, res) = joined.expect("request task panicked");
        match res {
            Ok(r) => {
                if out.len() <= k {
                    out.resize(k + 1, None);
                }
                out[k] = Some(r);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out.into_iter().map(|r| r.expect("every job finished")).collect()),
    }
}

/// FNV-1a of the request id, so reruns send the same seeds.
pub fn request_seed(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

struct Collected {
    problem: usize,
    correct: Vec<CompletionRecord>,
    incorrect: Vec<CompletionRecord>,
}

pub async fn run_remote_probe(
    client: &Client,
    problems: &[Problem],
    cfg: &RemoteProbeConfig,
) -> Result<RemoteProbeReport> {
    cfg.validate()?;
    let ids: Vec<String> =
        problems.iter().enumerate().map(|(i, p)| p.id.clone().unwrap_or_else(|| i.to_string())).collect();
    let budget = cfg.attempts_per_output * (cfg.n_correct + cfg.n_incorrect);
    let mut records = Vec::new();

    // Collection, in rounds: each round asks every unfinished problem for
    // as many samples as it still needs.
    let mut state: Vec<Collected> =
        (0..problems.len()).map(|problem| Collected { problem, correct: Vec::new(), incorrect: Vec::new() }).collect();
    let mut sent = vec![0usize; problems.len()];
    loop {
        let mut jobs = Vec::new();
        let mut owners = Vec::new();
        for s in &state {
            let need =
                cfg.n_correct.saturating_sub(s.correct.len()) + cfg.n_incorrect.saturating_sub(s.incorrect.len());
            let room = budget - sent[s.problem];
            for _ in 0..need.min(room) {
                let p = &problems[s.problem];
                jobs.push(Job {
                    id: format!("{}/collect/{}", ids[s.problem], sent[s.problem]),
                    question: p.question.clone(),
                    prefix: String::new(),
                    gold: p.answer.clone(),
                });
                owners.push(s.problem);
                sent[s.problem] += 1;
            }
        }
        if jobs.is_empty() {
            break;
        }
        for (owner, rec) in owners.into_iter().zip(run_jobs(client, jobs).await?) {
            let s = &mut state[owner];
            if rec.verdict.is_correct() {
                if s.correct.len() < cfg.n_correct {
                    s.correct.push(rec.clone());
                }
            } else if s.incorrect.len() < cfg.n_incorrect {
                s.incorrect.push(rec.clone());
            }
            records.push(rec);
        }
    }

    let mut kept = Vec::new();
    let mut skipped_problems = Vec::new();
    for s in state {
        if s.correct.len() == cfg.n_correct && s.incorrect.len() == cfg.n_incorrect {
            kept.push(s);
            continue;
        }
        match cfg.shortfall {
            Shortfall::Error => {
                return Err(Error::Shortfall {
                    problem: ids[s.problem].clone(),
                    correct: s.correct.len(),
                    incorrect: s.incorrect.len(),
                })
            }
            Shortfall::Skip => skipped_problems.push(ids[s.problem].clone()),
        }
    }

    let mut clusters = Vec::new();
    let mut jobs = Vec::new();
    let (mut in_tokens, mut in_words) = (0, 0);
    for s in &kept {
        let p = &problems[s.problem];
        let pid = &ids[s.problem];
        let mut add = |arm: Arm, tag: String, prefix: String, unit: Option<PrefixUnit>, source: Option<String>| {
            let request_ids: Vec<String> = (0..cfg.g).map(|j| format!("{pid}/{tag}/{j}")).collect();
            for id in &request_ids {
                jobs.push(Job {
                    id: id.clone(),
                    question: p.question.clone(),
                    prefix: prefix.clone(),
                    gold: p.answer.clone(),
                });
            }
            clusters.push(Cluster {
                problem_id: pid.clone(),
                arm,
                prefix,
                prefix_unit: unit,
                source_request: source,
                request_ids,
            });
        };
        for c in 0..cfg.n_correct {
            add(Arm::Baseline, format!("none/{c}"), String::new(), None, None);
        }
        for (arm, tag, outs) in
            [(Arm::CorrectPrefix, "correct", &s.correct), (Arm::IncorrectPrefix, "incorrect", &s.incorrect)]
        {
            for (c, rec) in outs.iter().enumerate() {
                let (prefix, unit) = cut_prefix(rec, cfg.eta);
                match unit {
                    PrefixUnit::Tokens => in_tokens += 1,
                    PrefixUnit::Words => in_words += 1,
                }
                add(arm, format!("{tag}/{c}"), prefix, Some(unit), Some(rec.request_id.clone()));
            }
        }
    }
    records.extend(run_jobs(client, jobs).await?);

    let mut injection_counts = BTreeMap::new();
    for r in &records {
        *injection_counts.entry(r.injection).or_insert(0) += 1;
    }
    let ec = client.config();
    let mut report = RemoteProbeReport {
        endpoint: EndpointSummary {
            base_url: ec.base_url.clone(),
            model: ec.model.clone(),
            temperature: ec.temperature,
            max_tokens: ec.max_tokens,
        },
        config: *cfg,
        baseline: ArmStats::from_verdicts(std::iter::empty::<&[bool]>()),
        correct_prefix: ArmStats::from_verdicts(std::iter::empty::<&[bool]>()),
        incorrect_prefix: ArmStats::from_verdicts(std::iter::empty::<&[bool]>()),
        problems_used: kept.len(),
        skipped_problems,
        injection_counts,
        prefixes_in_tokens: in_tokens,
        prefixes_in_words: in_words,
        clusters,
        records,
    };
    report.baseline = report.recount(Arm::Baseline);
    report.correct_prefix = report.recount(Arm::CorrectPrefix);
    report.incorrect_prefix = report.recount(Arm::IncorrectPrefix);
    Ok(report)
}
