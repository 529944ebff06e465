//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use pppo::harness::checkpoint::{load_checkpoint, save_checkpoint};
use pppo::harness::metrics::{read_log, step_records, write_log_entry, TokenTotals};
use pppo::harness::probe::{
    ble_intervention, ble_probe, eta_sweep, incorrect_prefixes, PrefixRule, ProbeConfig, Shortfall, DEFAULT_SWEEP,
};
use pppo::harness::{EffectivenessReport, Method, Summary, TrainConfig, Trainer};
use pppo::tasks::{generate_dataset, load_dataset, save_dataset, sym, TaskFamily, TaskInstance, TaskSpec, Vocab};
use pppo::SeedStream;
use pppo_probe::{read_problems, run_remote_probe, Client, EndpointConfig, RemoteProbeConfig};
use serde::Serialize;

use crate::failure::Failure;
use crate::{
    Cli, Command, DataArgs, GenTasksArgs, ProbeArgs, ProbeRemoteArgs, ProbeShape, ReportArgs, SweepArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, Failure>;

pub fn dispatch(cli: Cli) -> Result<()> {
    let base = base_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenTasks(a) => gen_tasks(&cli.out_dir, &base, a),
        Command::Train(a) => train(&cli.out_dir, base, cli.seed, a),
        Command::Probe(a) => probe(&cli.out_dir, cli.seed, a),
        Command::Sweep(a) => sweep(&cli.out_dir, cli.seed, a),
        Command::Report(a) => report(&cli.out_dir, a),
        Command::ProbeRemote(a) => probe_remote(&cli.out_dir, a),
    }
}

fn base_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
        c.apply_kv(&text)?;
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn out_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn parse_difficulty(raw: &str) -> Result<std::ops::RangeInclusive<u32>> {
    let bad = || Failure::config(format!("bad difficulty {raw:?}; expected N or LO-HI"));
    let (lo, hi) = raw.split_once('-').unwrap_or((raw, raw));
    let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok(lo..=hi)
}

/// The task set `gen-tasks` writes with no flags.
pub fn default_spec(seed: u64) -> TaskSpec {
    TaskSpec { family: TaskFamily::BranchingArithmetic, count: 250, difficulty: 2..=2, seed }
}

fn load_data(data: &DataArgs, seed: u64) -> Result<(Vec<TaskInstance>, Vocab)> {
    let vocab = match &data.vocab {
        Some(p) => serde_json::from_reader(BufReader::new(File::open(p)?))
            .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?,
        None => Vocab::standard(),
    };
    let tasks = match &data.tasks {
        Some(p) => load_dataset(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?,
        None => generate_dataset(&default_spec(seed))?,
    };
    for t in &tasks {
        vocab.check(&t.prompt)?;
        vocab.check(&t.answer)?;
    }
    Ok((tasks, vocab))
}

fn gen_tasks(out_dir: &Path, base: &TrainConfig, a: GenTasksArgs) -> Result<()> {
    let spec = TaskSpec {
        family: a.family.parse()?,
        count: a.count,
        difficulty: parse_difficulty(&a.difficulty)?,
        seed: base.seed,
    };
    let tasks = generate_dataset(&spec)?;
    save_dataset(&out_path(out_dir, "tasks.jsonl")?, &tasks)?;
    write_json(&out_dir.join("vocab.json"), &Vocab::standard())?;
    println!("wrote {} tasks to {}", tasks.len(), out_dir.display());
    Ok(())
}

fn train(out_dir: &Path, mut config: TrainConfig, seed: Option<u64>, a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if !a.overrides.is_empty() || a.method.is_some() || a.steps.is_some() {
                return Err(Failure::config("a resumed run keeps its checkpoint's settings"));
            }
            let (tasks, vocab) = load_data(&a.data, ckpt.config.seed)?;
            Trainer::resume(ckpt, vocab, &tasks)?
        }
        None => {
            for kv in &a.overrides {
                let (k, v) =
                    kv.split_once('=').ok_or_else(|| Failure::config(format!("--set {kv:?}: expected KEY=VALUE")))?;
                config.set(k.trim(), v.trim())?;
            }
            if let Some(m) = &a.method {
                config.set("method", m)?;
            }
            if let Some(s) = a.steps {
                config.steps = s;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            config.validate()?;
            let (tasks, vocab) = load_data(&a.data, config.seed)?;
            Trainer::new(config, vocab, &tasks)?
        }
    };
    trainer.dump_rollouts = a.dump_rollouts;

    let log_path = out_path(out_dir, "metrics.jsonl")?;
    // A resumed run appends to the log it continues.
    let mut log = BufWriter::new(open_log(&log_path, a.resume.is_some())?);
    let mut dumps = if a.dump_rollouts {
        Some(BufWriter::new(open_log(&out_dir.join("rollouts.jsonl"), a.resume.is_some())?))
    } else {
        None
    };
    fs::write(out_dir.join("config.kv"), trainer.config().to_kv())?;

    let ckpt_path = out_dir.join("checkpoint.bin");
    let every = a.checkpoint_every.unwrap_or(0) as u64;
    while !trainer.finished() {
        let out = trainer.step()?;
        for e in &out.entries {
            write_log_entry(&mut log, e)?;
        }
        log.flush()?;
        if let Some(w) = dumps.as_mut() {
            for d in &out.dumps {
                serde_json::to_writer(&mut *w, d)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        let step = trainer.state().step;
        if every > 0 && step % every == 0 {
            save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
        }
        if let Some(v) = &out.validation {
            eprintln!("step {step:>4}  val_acc {:.3}  eta {:.2}", v.accuracy, trainer.state().schedule.eta());
        }
    }
    let summary = trainer.summary()?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    save_checkpoint(&out_dir.join("policy.bin"), &trainer.checkpoint())?;
    println!(
        "{} steps: val acc {:.3} -> {:.3}{}",
        summary.steps_run,
        summary.initial_val_acc,
        summary.final_val_acc,
        summary.effectiveness.map(|e| format!(", POT {:.2}%, LE {:.2}", e.pot, e.le)).unwrap_or_default()
    );
    Ok(())
}

fn open_log(path: &Path, append: bool) -> Result<File> {
    if append {
        Ok(fs::OpenOptions::new().create(true).append(true).open(path)?)
    } else {
        Ok(File::create(path)?)
    }
}

struct Loaded {
    trainer_config: TrainConfig,
    params: pppo::policy::PolicyParams,
    tasks: Vec<TaskInstance>,
    vocab: Vocab,
    probe: ProbeConfig,
    streams: SeedStream,
}

fn load_for_probe(shape: &ProbeShape, seed: Option<u64>, eta: f64) -> Result<Loaded> {
    let ckpt = load_checkpoint(&shape.checkpoint)?;
    let seed = seed.unwrap_or(ckpt.config.seed);
    let (tasks, vocab) = load_data(&shape.data, ckpt.config.seed)?;
    if vocab.size() != ckpt.params.vocab_size() {
        return Err(Failure::config(format!(
            "vocabulary has {} symbols but the checkpoint expects {}",
            vocab.size(),
            ckpt.params.vocab_size()
        )));
    }
    let probe = ProbeConfig {
        eta,
        n_correct: shape.n_correct,
        n_incorrect: shape.n_incorrect,
        g: shape.g,
        max_len: ckpt.config.max_len,
        attempts_per_output: shape.attempts,
        shortfall: if shape.skip_shortfall { Shortfall::Skip } else { Shortfall::Error },
        prefix_rule: if shape.exact_prefix { PrefixRule::Exact } else { PrefixRule::Lifted },
    };
    probe.validate()?;
    Ok(Loaded {
        trainer_config: ckpt.config,
        params: ckpt.params,
        tasks,
        vocab,
        probe,
        streams: SeedStream::new(seed).named("probe"),
    })
}

#[derive(Serialize)]
struct ProbeOutput {
    method: Method,
    probe: pppo::harness::probe::ProbeReport,
    intervention: Option<pppo::harness::probe::InterventionReport>,
}

fn probe(out_dir: &Path, seed: Option<u64>, a: ProbeArgs) -> Result<()> {
    let l = load_for_probe(&a.shape, seed, a.eta)?;
    let report = ble_probe(&l.params, &l.vocab, &l.tasks, &l.probe, l.streams)?;
    let intervention = if a.intervention {
        let wrong = incorrect_prefixes(&report, &l.tasks);
        Some(ble_intervention(
            &l.params,
            &l.vocab,
            &wrong,
            &[sym::WAIT, sym::HOWEVER],
            l.probe.g,
            l.probe.max_len,
            l.streams.named("intervention"),
        )?)
    } else {
        None
    };
    for (name, arm) in
        [("none", &report.baseline), ("correct", &report.correct_prefix), ("incorrect", &report.incorrect_prefix)]
    {
        println!("{name:<10} acc {:.3} ± {:.3}  ({} prefixes)", arm.accuracy, 1.96 * arm.std_err, arm.prefixes);
    }
    if let Some(iv) = &intervention {
        for arm in &iv.with {
            println!("+{:<9} acc {:.3}  recovery {:+.3}", arm.symbol, arm.stats.accuracy, arm.recovery);
        }
    }
    let out = ProbeOutput { method: l.trainer_config.method, probe: report, intervention };
    write_json(&out_path(out_dir, "probe.json")?, &out)
}

fn sweep(out_dir: &Path, seed: Option<u64>, a: SweepArgs) -> Result<()> {
    let etas = a.etas.unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
    let l = load_for_probe(&a.shape, seed, etas[0])?;
    let report = eta_sweep(&l.params, &l.vocab, &l.tasks, &etas, &l.probe, l.streams)?;
    for (i, eta) in report.etas.iter().enumerate() {
        println!(
            "eta {eta:.2}  correct {:.3}  incorrect {:.3}  gap {:+.3}",
            report.correct_prefix_acc[i], report.incorrect_prefix_acc[i], report.gap[i]
        );
    }
    write_json(&out_path(out_dir, "sweep.json")?, &report)
}

#[derive(Serialize)]
struct RunReport {
    run: PathBuf,
    method: Method,
    steps_run: u64,
    initial_val_acc: f64,
    final_val_acc: f64,
    totals: TokenTotals,
    effectiveness: EffectivenessReport,
}

#[derive(Serialize)]
struct ReportOutput {
    runs: Vec<RunReport>,
    given: Option<EffectivenessReport>,
}

fn report(out_dir: &Path, a: ReportArgs) -> Result<()> {
    let given = match (a.aai, a.pot) {
        (Some(aai), Some(pot)) => Some(EffectivenessReport::from_parts(aai, pot)?),
        _ => None,
    };
    if a.runs.is_empty() && given.is_none() {
        return Err(Failure::config("nothing to report: pass --run DIR or --aai with --pot"));
    }
    let mut runs = Vec::new();
    for dir in &a.runs {
        let summary: Summary = serde_json::from_reader(BufReader::new(File::open(dir.join("summary.json"))?))
            .map_err(|e| Failure::config(format!("{}: {e}", dir.join("summary.json").display())))?;
        let log = read_log(BufReader::new(File::open(dir.join("metrics.jsonl"))?))?;
        let mut totals = TokenTotals::default();
        for r in step_records(&log) {
            totals.add(r);
        }
        if totals != summary.totals {
            return Err(Failure::config(format!(
                "{}: metrics log and summary disagree on token totals",
                dir.display()
            )));
        }
        let effectiveness =
            EffectivenessReport::from_parts(100.0 * (summary.final_val_acc - summary.initial_val_acc), totals.pot()?)?;
        runs.push(RunReport {
            run: dir.clone(),
            method: summary.method,
            steps_run: summary.steps_run,
            initial_val_acc: summary.initial_val_acc,
            final_val_acc: summary.final_val_acc,
            totals,
            effectiveness,
        });
    }
    println!("{:<32} {:>8} {:>8} {:>8}", "run", "AAI", "POT", "LE");
    for r in &runs {
        let e = r.effectiveness;
        println!("{:<32} {:>8.2} {:>8.2} {:>8.2}", r.run.display(), e.aai, e.pot, e.le);
    }
    if let Some(e) = given {
        println!("{:<32} {:>8.2} {:>8.2} {:>8.2}", "(given)", e.aai, e.pot, e.le);
    }
    write_json(&out_path(out_dir, "report.json")?, &ReportOutput { runs, given })
}

fn probe_remote(out_dir: &Path, a: ProbeRemoteArgs) -> Result<()> {
    let text = fs::read_to_string(&a.endpoint_config)
        .map_err(|e| Failure::config(format!("{}: {e}", a.endpoint_config.display())))?;
    let endpoint = EndpointConfig::from_json(&text)?;
    let problems = read_problems(BufReader::new(File::open(&a.problems)?))?;
    let cfg = RemoteProbeConfig {
        eta: a.eta,
        n_correct: a.n_correct,
        n_incorrect: a.n_incorrect,
        g: a.g,
        attempts_per_output: a.attempts,
        shortfall: if a.skip_shortfall { Shortfall::Skip } else { Shortfall::Error },
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let report = runtime.block_on(async {
        let client = Client::new(endpoint)?;
        run_remote_probe(&client, &problems, &cfg).await
    })?;
    for (name, arm) in
        [("none", &report.baseline), ("correct", &report.correct_prefix), ("incorrect", &report.incorrect_prefix)]
    {
        println!("{name:<10} acc {:.3} ± {:.3}  ({} prefixes)", arm.accuracy, 1.96 * arm.std_err, arm.prefixes);
    }
    let path = match a.out {
        Some(p) => p,
        None => out_path(out_dir, "probe-remote.json")?,
    };
    write_json(&path, &report)
}
