//! The training loop.
//!
//! Each step: snapshot the policy, sample groups for a batch of instances,
//! score them, take one ascent step on the surrogate, and every `val_every`
//! steps validate and let the schedule react. Every random draw is keyed by
//! `(seed, purpose, step, ...)`, so a resumed run replays the uninterrupted
//! one exactly.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::backbone::{build_backbone, corpus_spec_like, BackboneConfig, BackboneReport};
use super::checkpoint::Checkpoint;
use super::metrics::{compute_effectiveness, LogEntry, MetricsRecord, Summary, TokenTotals, POT_DEFINITION};
use super::{Method, TrainConfig};
use crate::error::{Error, Result};
use crate::objective::{apply_update, baseline_full_token_objective, pppo_objective_with, BatchItem, StepBatch};
use crate::policy::{snapshot, PolicyParams};
use crate::rng::SeedStream;
use crate::rollout::{build_batch_groups, GroupDump, GroupPlan, RewardConfig};
use crate::schedule::{evaluate_validation, ScheduleState, ValReport};
use crate::tasks::{generate_dataset, TaskInstance, Vocab};

/// Everything besides the weights that a resumed run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Updates applied so far.
    pub step: u64,
    pub schedule: ScheduleState,
    pub initial_val_acc: f64,
    pub totals: TokenTotals,
    pub eta_events: usize,
    pub mean_output_len_first: Option<f64>,
    pub mean_output_len_last: Option<f64>,
    pub stopped_early: bool,
    /// Every step's objective, kept for the summary.
    pub records: Vec<MetricsRecord>,
}

/// Output of one [`Trainer::step`].
#[derive(Clone, Debug, Default)]
pub struct StepOutput {
    pub entries: Vec<LogEntry>,
    pub dumps: Vec<GroupDump>,
    pub validation: Option<ValReport>,
}

/// Holds-out the last `⌈fraction · n⌉` instances (at least one, never all).
pub fn split_dataset(data: &[TaskInstance], fraction: f64) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    if data.len() < 2 {
        return Err(Error::Config(format!("need at least 2 instances to split, got {}", data.len())));
    }
    let n_val = ((data.len() as f64 * fraction).ceil() as usize).clamp(1, data.len() - 1);
    let cut = data.len() - n_val;
    Ok((data[..cut].to_vec(), data[cut..].to_vec()))
}

pub struct Trainer {
    config: TrainConfig,
    vocab: Vocab,
    train: Vec<TaskInstance>,
    val: Vec<TaskInstance>,
    params: PolicyParams,
    state: TrainerState,
    streams: SeedStream,
    backbone: Option<BackboneReport>,
    /// Collect [`GroupDump`]s in each step's output.
    pub dump_rollouts: bool,
}

impl Trainer {
    /// Splits `dataset`, builds the backbone and measures initial accuracy.
    pub fn new(config: TrainConfig, vocab: Vocab, dataset: &[TaskInstance]) -> Result<Self> {
        config.validate()?;
        let (train, val) = split_dataset(dataset, config.val_fraction)?;
        Self::with_split(config, vocab, train, val)
    }

    pub fn with_split(
        config: TrainConfig,
        vocab: Vocab,
        train: Vec<TaskInstance>,
        val: Vec<TaskInstance>,
    ) -> Result<Self> {
        config.validate()?;
        let streams = SeedStream::new(config.seed);
        let params = Self::initial_params(&config, &vocab, &train, streams)?;
        Self::from_params(config, vocab, train, val, params.0, params.1)
    }

    /// Starts from given weights (no warm start).
    pub fn from_params(
        config: TrainConfig,
        vocab: Vocab,
        train: Vec<TaskInstance>,
        val: Vec<TaskInstance>,
        params: PolicyParams,
        backbone: Option<BackboneReport>,
    ) -> Result<Self> {
        config.validate()?;
        check_data(&vocab, &params, &train, &val)?;
        let streams = SeedStream::new(config.seed);
        let initial = evaluate_validation(
            &params,
            &vocab,
            &val,
            config.final_eval_k,
            config.max_len,
            0,
            streams.named("eval").child(0),
        )?;
        let state = TrainerState {
            step: 0,
            schedule: config.schedule()?,
            initial_val_acc: initial.accuracy,
            totals: TokenTotals::default(),
            eta_events: 0,
            mean_output_len_first: None,
            mean_output_len_last: None,
            stopped_early: false,
            records: Vec::new(),
        };
        Ok(Trainer { config, vocab, train, val, params, state, streams, backbone, dump_rollouts: false })
    }

    /// Continues a run saved with [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, vocab: Vocab, dataset: &[TaskInstance]) -> Result<Self> {
        let state =
            ckpt.state.ok_or_else(|| Error::Checkpoint("checkpoint has no trainer state to resume from".into()))?;
        ckpt.config.validate()?;
        let (train, val) = split_dataset(dataset, ckpt.config.val_fraction)?;
        check_data(&vocab, &ckpt.params, &train, &val)?;
        Ok(Trainer {
            streams: SeedStream::new(ckpt.config.seed),
            config: ckpt.config,
            vocab,
            train,
            val,
            params: ckpt.params,
            state,
            backbone: None,
            dump_rollouts: false,
        })
    }

    /// Zero weights warm-started on a corpus drawn like `train`.
    pub fn initial_params(
        config: &TrainConfig,
        vocab: &Vocab,
        train: &[TaskInstance],
        streams: SeedStream,
    ) -> Result<(PolicyParams, Option<BackboneReport>)> {
        let map = config.feature_map(vocab.size())?;
        let corpus = if config.backbone_corpus > 0 {
            let spec = corpus_spec_like(train, config.backbone_corpus, streams.named("backbone-corpus").raw())?;
            generate_dataset(&spec)?
        } else {
            Vec::new()
        };
        let cfg = BackboneConfig {
            epochs: config.backbone_epochs,
            learning_rate: config.backbone_lr,
            direct_share: config.backbone_direct_share,
        };
        build_backbone(map, &corpus, &cfg, streams.named("backbone"))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn train_split(&self) -> &[TaskInstance] {
        &self.train
    }

    pub fn val_split(&self) -> &[TaskInstance] {
        &self.val
    }

    pub fn backbone_report(&self) -> Option<&BackboneReport> {
        self.backbone.as_ref()
    }

    pub fn finished(&self) -> bool {
        self.state.stopped_early || self.state.step >= self.config.steps as u64
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { params: self.params.clone(), config: self.config.clone(), state: Some(self.state.clone()) }
    }

    fn plan(&self) -> GroupPlan {
        match self.config.method {
            Method::Pppo => GroupPlan {
                n: self.config.n,
                g: self.config.g,
                eta: self.state.schedule.eta(),
                max_len: self.config.max_len,
            },
            Method::BaselineFullToken => GroupPlan { n: self.config.n, g: 0, eta: 1.0, max_len: self.config.max_len },
        }
    }

    /// Runs one update.
    pub fn step(&mut self) -> Result<StepOutput> {
        let t = self.state.step + 1;
        let step_streams = self.streams.named("step").child(t);
        let plan = self.plan();

        let k = self.config.batch_size.min(self.train.len());
        let picked = index::sample(&mut step_streams.named("batch").rng(), self.train.len(), k).into_vec();
        let instances: Vec<TaskInstance> = picked.iter().map(|&i| self.train[i].clone()).collect();

        let reward = RewardConfig { format_weight: self.config.format_weight, ..RewardConfig::default() };
        let snap = snapshot(&self.params);
        let groups = build_batch_groups(&snap, &self.vocab, &instances, plan, &reward, step_streams.named("groups"))?;

        let mut out = StepOutput::default();
        if self.dump_rollouts {
            out.dumps = groups.iter().flatten().map(|g| g.dump()).collect();
        }
        let (mut original, mut generated, mut sequences, mut reward_sum) = (0u64, 0u64, 0u64, 0.0);
        for g in groups.iter().flatten() {
            let len = g.source.generated.len() as u64;
            original += len;
            generated += len + g.continuations.iter().map(|c| c.len() as u64).sum::<u64>();
            sequences += 1 + g.continuations.len() as u64;
            reward_sum += g.total_reward();
        }
        let n_groups = groups.iter().map(Vec::len).sum::<usize>() as f64;
        let batch = StepBatch {
            items: instances.into_iter().zip(groups).map(|(instance, groups)| BatchItem { instance, groups }).collect(),
            eta: plan.eta,
            snapshot: snap,
        };

        let clip = self.config.clip();
        let fail = |e: Error| Error::StepFailed { step: t as usize, detail: e.to_string() };
        let surrogate = match self.config.method {
            Method::Pppo => pppo_objective_with(&batch, &self.params, &clip, self.config.normalizer),
            Method::BaselineFullToken => baseline_full_token_objective(&batch, &self.params, &clip),
        }
        .map_err(fail)?;
        apply_update(&mut self.params, &surrogate.gradient, clip.learning_rate).map_err(fail)?;

        self.state.step = t;
        let mean_output_len = original as f64 / n_groups;
        let mut record = MetricsRecord {
            step: t,
            objective: surrogate.objective,
            loss: -surrogate.objective,
            val_acc: None,
            mean_output_len,
            mean_reward: reward_sum / n_groups,
            retained_tokens: surrogate.retained_tokens as u64,
            original_tokens: original,
            total_generated_tokens: generated,
            sampled_sequences: sequences,
            clipped_tokens: surrogate.clipped_tokens as u64,
            eta: plan.eta,
        };
        self.state.mean_output_len_first.get_or_insert(mean_output_len);
        self.state.mean_output_len_last = Some(mean_output_len);
        self.state.totals.add(&record);

        let mut event = None;
        if t.is_multiple_of(self.config.val_every as u64) {
            let report = evaluate_validation(
                &self.params,
                &self.vocab,
                &self.val,
                self.config.val_k,
                self.config.max_len,
                t,
                self.streams.named("val").child(t),
            )?;
            record.val_acc = Some(report.accuracy);
            if self.config.method == Method::Pppo {
                event = self.state.schedule.observe(&report);
            }
            if self.config.target_val_acc.is_some_and(|target| report.accuracy >= target) {
                self.state.stopped_early = true;
            }
            out.validation = Some(report);
        }
        self.state.records.push(record.clone());
        out.entries.push(LogEntry::Step(record));
        if let Some(e) = event {
            self.state.eta_events += 1;
            out.entries.push(LogEntry::Eta(e));
        }
        Ok(out)
    }

    /// Steps until done, handing every step's output to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&StepOutput) -> Result<()>) -> Result<Summary> {
        while !self.finished() {
            let out = self.step()?;
            sink(&out)?;
        }
        self.summary()
    }

    /// avg@`final_eval_k` on the validation split with the current weights.
    pub fn evaluate_final(&self) -> Result<ValReport> {
        evaluate_validation(
            &self.params,
            &self.vocab,
            &self.val,
            self.config.final_eval_k,
            self.config.max_len,
            self.state.step,
            self.streams.named("eval").child(1),
        )
    }

    pub fn summary(&self) -> Result<Summary> {
        let final_val = self.evaluate_final()?;
        let effectiveness = if self.state.records.is_empty() {
            None
        } else {
            Some(compute_effectiveness(self.state.initial_val_acc, final_val.accuracy, &self.state.records)?)
        };
        Ok(Summary {
            method: self.config.method,
            steps_run: self.state.step,
            stopped_early: self.state.stopped_early,
            initial_val_acc: self.state.initial_val_acc,
            final_val_acc: final_val.accuracy,
            eval_k: self.config.final_eval_k,
            totals: self.state.totals,
            effectiveness,
            pot_definition: POT_DEFINITION.to_string(),
            final_eta: self.plan().eta,
            eta_events: self.state.eta_events,
            mean_output_len_first: self.state.mean_output_len_first.unwrap_or(0.0),
            mean_output_len_last: self.state.mean_output_len_last.unwrap_or(0.0),
        })
    }
}

fn check_data(vocab: &Vocab, params: &PolicyParams, train: &[TaskInstance], val: &[TaskInstance]) -> Result<()> {
    if params.vocab_size() != vocab.size() {
        return Err(Error::Shape(format!(
            "policy vocabulary {} vs task vocabulary {}",
            params.vocab_size(),
            vocab.size()
        )));
    }
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyValidation);
    }
    for inst in train.iter().chain(val) {
        if inst.prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        vocab.check(&inst.prompt)?;
        vocab.check(&inst.answer)?;
    }
    Ok(())
}
