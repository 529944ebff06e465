//! Progressive prefix retention: validation and the stagnation-triggered
//! increase of η.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_unchecked, PolicyParams, Scratch};
use crate::rng::SeedStream;
use crate::tasks::{verify_correct, TaskInstance, Vocab};

/// What a validation report is compared against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    /// Best accuracy seen so far.
    #[default]
    Best,
    /// The immediately preceding report.
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub eta0: f64,
    pub eta_step: f64,
    pub eta_max: f64,
    pub patience: u32,
    pub comparison: Comparison,
    /// Number of increments applied so far.
    pub level: u32,
    pub stagnant_count: u32,
    /// `None` until the first report.
    pub best_val_acc: Option<f64>,
    pub last_val_acc: Option<f64>,
}

impl Default for ScheduleState {
    fn default() -> Self {
        ScheduleState::new(0.15, 0.05, 0.35, 3).expect("default schedule is valid")
    }
}

/// Emitted whenever η changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaEvent {
    pub step: u64,
    pub old_eta: f64,
    pub new_eta: f64,
    pub val_acc: f64,
}

/// avg@k over a validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValReport {
    pub step: u64,
    pub accuracy: f64,
    pub k: usize,
    /// Correct samples out of `k` for each instance, in split order.
    pub per_instance_correct: Vec<usize>,
}

fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

impl ScheduleState {
    pub fn new(eta0: f64, eta_step: f64, eta_max: f64, patience: u32) -> Result<Self> {
        if !(eta0 > 0.0 && eta0 <= eta_max && eta_max <= 1.0) {
            return Err(Error::Config(format!("need 0 < eta0 <= eta_max <= 1, got eta0={eta0} eta_max={eta_max}")));
        }
        if !(eta_step >= 0.0 && eta_step.is_finite()) {
            return Err(Error::Config(format!("eta_step must be >= 0, got {eta_step}")));
        }
        if patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(ScheduleState {
            eta0,
            eta_step,
            eta_max,
            patience,
            comparison: Comparison::Best,
            level: 0,
            stagnant_count: 0,
            best_val_acc: None,
            last_val_acc: None,
        })
    }

    fn eta_at(&self, level: u32) -> f64 {
        round9(self.eta0 + f64::from(level) * self.eta_step).min(self.eta_max)
    }

    pub fn eta(&self) -> f64 {
        self.eta_at(self.level)
    }

    /// Applies one report; returns the event when η moved.
    pub fn observe(&mut self, val: &ValReport) -> Option<EtaEvent> {
        let reference = match self.comparison {
            Comparison::Best => self.best_val_acc,
            Comparison::Previous => self.last_val_acc,
        };
        let improved = reference.is_none_or(|r| val.accuracy - r > 0.0);
        self.last_val_acc = Some(val.accuracy);
        if self.best_val_acc.is_none_or(|b| val.accuracy > b) {
            self.best_val_acc = Some(val.accuracy);
        }
        if improved {
            self.stagnant_count = 0;
            return None;
        }
        self.stagnant_count += 1;
        if self.stagnant_count < self.patience {
            return None;
        }
        self.stagnant_count = 0;
        let old_eta = self.eta();
        let new_eta = self.eta_at(self.level + 1);
        if new_eta <= old_eta {
            return None;
        }
        self.level += 1;
        Some(EtaEvent { step: val.step, old_eta, new_eta, val_acc: val.accuracy })
    }
}

/// Pure form of [`ScheduleState::observe`].
pub fn update_eta(state: &ScheduleState, val: &ValReport) -> ScheduleState {
    let mut next = state.clone();
    next.observe(val);
    next
}

/// Samples `k` outputs per instance; sample `s` of instance `i` uses stream
/// `i/s`.
pub fn evaluate_validation(
    params: &PolicyParams,
    vocab: &Vocab,
    val: &[TaskInstance],
    k: usize,
    max_len: usize,
    step: u64,
    streams: SeedStream,
) -> Result<ValReport> {
    if val.is_empty() {
        return Err(Error::EmptyValidation);
    }
    if k == 0 {
        return Err(Error::Config("validation k must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    for inst in val {
        if inst.prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        params.check_tokens(&inst.prompt)?;
    }
    let per_instance_correct: Vec<usize> = val
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let s = streams.child(i as u64);
            let mut scratch = Scratch::default();
            (0..k as u64)
                .filter(|&j| {
                    let g = sample_unchecked(
                        params,
                        &inst.prompt,
                        &[],
                        vocab.eos(),
                        max_len,
                        &mut s.child(j).rng(),
                        &mut scratch,
                    );
                    verify_correct(vocab, &g.tokens, inst)
                })
                .count()
        })
        .collect();
    let accuracy = per_instance_correct.iter().map(|&c| c as f64 / k as f64).sum::<f64>() / val.len() as f64;
    Ok(ValReport { step, accuracy, k, per_instance_correct })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(step: u64, accuracy: f64) -> ValReport {
        ValReport { step, accuracy, k: 1, per_instance_correct: vec![] }
    }

    #[test]
    fn three_stagnant_reports_raise_eta() {
        let mut s = ScheduleState::default();
        assert_eq!(s.observe(&report(0, 0.5)), None);
        assert_eq!(s.observe(&report(5, 0.5)), None);
        assert_eq!(s.observe(&report(10, 0.4)), None);
        let e = s.observe(&report(15, 0.5)).unwrap();
        assert_eq!((e.old_eta, e.new_eta, e.step), (0.15, 0.2, 15));
        assert_eq!(s.stagnant_count, 0);
    }

    #[test]
    fn improvement_resets_counter() {
        let mut s = ScheduleState::default();
        s.observe(&report(0, 0.5));
        s.observe(&report(1, 0.4));
        s.observe(&report(2, 0.6));
        assert_eq!(s.stagnant_count, 0);
        assert_eq!(s.eta(), 0.15);
    }

    #[test]
    fn saturates_at_cap() {
        let mut s = ScheduleState::default();
        s.observe(&report(0, 0.9));
        let mut etas = vec![s.eta()];
        for step in 1..40 {
            s.observe(&report(step, 0.1));
            etas.push(s.eta());
        }
        assert_eq!(*etas.last().unwrap(), 0.35);
        assert!(etas.iter().all(|e| [0.15, 0.2, 0.25, 0.3, 0.35].contains(e)));
        assert!(etas.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn previous_mode_compares_last_report() {
        let mut s = ScheduleState { comparison: Comparison::Previous, ..ScheduleState::default() };
        s.observe(&report(0, 0.9));
        s.observe(&report(1, 0.2));
        // Up relative to the previous report, though below the best.
        s.observe(&report(2, 0.3));
        assert_eq!(s.stagnant_count, 0);
        assert_eq!(s.best_val_acc, Some(0.9));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ScheduleState::new(0.0, 0.05, 0.35, 3).is_err());
        assert!(ScheduleState::new(0.4, 0.05, 0.35, 3).is_err());
        assert!(ScheduleState::new(0.15, 0.05, 0.35, 0).is_err());
    }
}
