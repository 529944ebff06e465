//! Run configuration and its line-oriented `key = value` file format.
//!
//! ```text
//! # comments and blank lines are ignored
//! method = pppo
//! n = 8
//! learning_rate = 2.0
//! target_val_acc = 0.5
//! ```

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::objective::{ClipConfig, Normalizer};
use crate::policy::FeatureMap;
use crate::schedule::{Comparison, ScheduleState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Pppo,
    BaselineFullToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Original outputs per instance.
    pub n: usize,
    /// Continuations per prefix (PPPO only).
    pub g: usize,
    pub eta0: f64,
    pub eta_step: f64,
    pub eta_max: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub learning_rate: f64,
    pub max_len: usize,
    pub steps: usize,
    /// Instances per step.
    pub batch_size: usize,
    pub patience: u32,
    pub val_every: usize,
    pub val_k: usize,
    /// Samples per instance for the initial and final accuracy.
    pub final_eval_k: usize,
    /// Share of the dataset held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub context_order: usize,
    pub hash_bits: u32,
    /// Largest set of window positions hashed together as one feature.
    pub conjunction_order: usize,
    pub comparison: Comparison,
    pub normalizer: Normalizer,
    pub format_weight: f64,
    /// Stop once a validation report reaches this accuracy.
    pub target_val_acc: Option<f64>,
    pub backbone_corpus: usize,
    pub backbone_epochs: usize,
    pub backbone_lr: f64,
    /// Weight of the direct strategy in the warm-start demonstrations.
    pub backbone_direct_share: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Pppo,
            n: 8,
            g: 8,
            eta0: 0.15,
            eta_step: 0.05,
            eta_max: 0.35,
            eps_low: 0.2,
            eps_high: 0.28,
            learning_rate: 2.0,
            max_len: 24,
            steps: 300,
            batch_size: 8,
            patience: 3,
            val_every: 5,
            val_k: 8,
            final_eval_k: 32,
            val_fraction: 0.2,
            seed: 0,
            context_order: 7,
            hash_bits: 18,
            conjunction_order: 3,
            comparison: Comparison::Best,
            normalizer: Normalizer::AllTokens,
            format_weight: 0.0,
            target_val_acc: None,
            backbone_corpus: 8000,
            backbone_epochs: 4,
            backbone_lr: 0.5,
            backbone_direct_share: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.batch_size == 0 || self.val_every == 0 || self.val_k == 0 || self.final_eval_k == 0 {
            return bad("batch_size, val_every, val_k and final_eval_k must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.backbone_direct_share) {
            return bad(format!("backbone_direct_share must be in [0, 1], got {}", self.backbone_direct_share));
        }
        if !(self.backbone_lr >= 0.0 && self.backbone_lr.is_finite()) {
            return bad(format!("backbone_lr must be finite and >= 0, got {}", self.backbone_lr));
        }
        if !self.format_weight.is_finite() {
            return bad("format_weight must be finite".into());
        }
        self.clip().validate()?;
        self.schedule()?;
        self.feature_map(2)?;
        Ok(())
    }

    pub fn feature_map(&self, vocab_size: usize) -> Result<FeatureMap> {
        FeatureMap::new(vocab_size, self.context_order, self.hash_bits)?.with_conjunctions(self.conjunction_order)
    }

    pub fn clip(&self) -> ClipConfig {
        ClipConfig { eps_low: self.eps_low, eps_high: self.eps_high, learning_rate: self.learning_rate }
    }

    pub fn schedule(&self) -> Result<ScheduleState> {
        let mut s = ScheduleState::new(self.eta0, self.eta_step, self.eta_max, self.patience)?;
        s.comparison = self.comparison;
        Ok(s)
    }

    /// Overrides one field from its textual form.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut map = match serde_json::to_value(&*self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes as an object"),
        };
        let current = map.get(key).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let value = parse_value(current, raw).ok_or_else(|| Error::Config(format!("bad value {raw:?} for {key}")))?;
        map.insert(key.to_string(), value);
        *self = from_map(map).map_err(|e| Error::Config(format!("bad value {raw:?} for {key}: {e}")))?;
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else { unreachable!("config serializes as an object") };
        map.iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k} = {s}\n"),
                Value::Null => format!("# {k} =\n"),
                other => format!("{k} = {other}\n"),
            })
            .collect()
    }
}

fn from_map(map: Map<String, Value>) -> serde_json::Result<TrainConfig> {
    serde_json::from_value(Value::Object(map))
}

fn parse_value(current: &Value, raw: &str) -> Option<Value> {
    match current {
        Value::Number(_) => serde_json::from_str::<serde_json::Number>(raw).ok().map(Value::Number),
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::String(_) => Some(Value::String(raw.to_string())),
        // Optional fields: a number, or `none` to clear.
        Value::Null => match raw {
            "none" | "" => Some(Value::Null),
            _ => serde_json::from_str::<serde_json::Number>(raw).ok().map(Value::Number),
        },
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.n, c.g, c.eta0, c.eta_step, c.eta_max), (8, 8, 0.15, 0.05, 0.35));
        assert_eq!((c.eps_low, c.eps_high), (0.2, 0.28));
    }

    #[test]
    fn kv_parsing_and_round_trip() {
        let c = TrainConfig::from_kv(
            "# run\nmethod = baseline-full-token\nn = 72\n\nlearning_rate=0.5\ntarget_val_acc = 0.45\n",
        )
        .unwrap();
        assert_eq!(c.method, Method::BaselineFullToken);
        assert_eq!(c.n, 72);
        assert_eq!(c.learning_rate, 0.5);
        assert_eq!(c.target_val_acc, Some(0.45));
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn kv_errors() {
        assert!(TrainConfig::from_kv("nonsense = 1").is_err());
        assert!(TrainConfig::from_kv("n = many").is_err());
        assert!(TrainConfig::from_kv("n = -3").is_err());
        assert!(TrainConfig::from_kv("method = sgd").is_err());
        assert!(TrainConfig::from_kv("just words").is_err());
    }
}
