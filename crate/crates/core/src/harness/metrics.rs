//! Per-step records, the run summary, and the learning-effectiveness metrics.
//!
//! - AAI: final minus initial validation accuracy, in percentage points.
//! - POT: `100 · Σ retained / Σ original-output tokens` over the run.
//! - LE: `AAI / POT · 100`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::EtaEvent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub objective: f64,
    /// `-objective`.
    pub loss: f64,
    pub val_acc: Option<f64>,
    pub mean_output_len: f64,
    pub mean_reward: f64,
    /// Original-output tokens with mask 1.
    pub retained_tokens: u64,
    /// All original-output tokens.
    pub original_tokens: u64,
    /// Original plus continuation tokens.
    pub total_generated_tokens: u64,
    pub sampled_sequences: u64,
    pub clipped_tokens: u64,
    pub eta: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum LogEntry {
    Step(MetricsRecord),
    Eta(EtaEvent),
}

pub fn write_log_entry<W: Write>(mut w: W, entry: &LogEntry) -> Result<()> {
    serde_json::to_writer(&mut w, entry)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogEntry>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn step_records(log: &[LogEntry]) -> impl Iterator<Item = &MetricsRecord> {
    log.iter().filter_map(|e| match e {
        LogEntry::Step(r) => Some(r),
        LogEntry::Eta(_) => None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessReport {
    /// Percentage points.
    pub aai: f64,
    /// Percent.
    pub pot: f64,
    pub le: f64,
}

impl EffectivenessReport {
    pub fn from_parts(aai: f64, pot: f64) -> Result<Self> {
        if pot <= 0.0 || !pot.is_finite() {
            return Err(Error::ZeroPot);
        }
        Ok(EffectivenessReport { aai, pot, le: aai / pot * 100.0 })
    }
}

/// Token totals summed over a run's step records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub retained: u64,
    pub original: u64,
    pub generated: u64,
    pub sequences: u64,
}

impl TokenTotals {
    pub fn add(&mut self, r: &MetricsRecord) {
        self.retained += r.retained_tokens;
        self.original += r.original_tokens;
        self.generated += r.total_generated_tokens;
        self.sequences += r.sampled_sequences;
    }

    pub fn pot(&self) -> Result<f64> {
        if self.original == 0 || self.retained == 0 {
            return Err(Error::ZeroPot);
        }
        Ok(100.0 * self.retained as f64 / self.original as f64)
    }
}

/// AAI from the two accuracies (fractions), POT from the step records.
pub fn compute_effectiveness<'a>(
    initial_acc: f64,
    final_acc: f64,
    records: impl IntoIterator<Item = &'a MetricsRecord>,
) -> Result<EffectivenessReport> {
    let mut totals = TokenTotals::default();
    let mut any = false;
    for r in records {
        totals.add(r);
        any = true;
    }
    if !any {
        return Err(Error::Config("no step records".into()));
    }
    EffectivenessReport::from_parts(100.0 * (final_acc - initial_acc), totals.pot()?)
}

/// Written next to the metrics log when a run ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: super::Method,
    pub steps_run: u64,
    pub stopped_early: bool,
    pub initial_val_acc: f64,
    pub final_val_acc: f64,
    pub eval_k: usize,
    pub totals: TokenTotals,
    pub effectiveness: Option<EffectivenessReport>,
    /// How POT is counted, for readers of the summary.
    pub pot_definition: String,
    pub final_eta: f64,
    pub eta_events: usize,
    pub mean_output_len_first: f64,
    pub mean_output_len_last: f64,
}

pub const POT_DEFINITION: &str =
    "retained original-output tokens / all original-output tokens; continuation tokens are in totals.generated only";
