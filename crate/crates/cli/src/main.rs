//! `pppo`: generate tasks, train, probe, sweep, and report.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "pppo", version, about = "Prefix-token policy optimization lab")]
struct Cli {
    /// `key = value` settings file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a task set (tasks.jsonl) and its vocabulary (vocab.json).
    GenTasks(GenTasksArgs),
    /// Train a policy; writes metrics.jsonl, summary.json and policy.bin.
    Train(TrainArgs),
    /// Prefix-conditioned accuracy of a trained policy.
    Probe(ProbeArgs),
    /// Probe over a grid of prefix proportions.
    Sweep(SweepArgs),
    /// Effectiveness table for finished runs.
    Report(ReportArgs),
    /// The probe protocol against an OpenAI-compatible endpoint.
    ProbeRemote(ProbeRemoteArgs),
}

#[derive(Args, Debug)]
struct GenTasksArgs {
    #[arg(long, default_value = "branching-arithmetic")]
    family: String,
    #[arg(long, default_value_t = 250)]
    count: usize,
    /// A single level (`2`) or an inclusive range (`1-3`).
    #[arg(long, default_value = "2")]
    difficulty: String,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Tasks JSONL; the default task set for the seed when omitted.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Vocabulary JSON; the standard vocabulary when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `pppo` or `baseline-full-token`.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Override any setting, e.g. `--set learning_rate=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint written with `--checkpoint-every`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also save `checkpoint.bin` every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Write one line per prefix group to rollouts.jsonl.
    #[arg(long)]
    dump_rollouts: bool,
}

#[derive(Args, Debug)]
struct ProbeShape {
    /// Policy checkpoint (`policy.bin` with its `.json` sidecar).
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 4)]
    n_correct: usize,
    #[arg(long, default_value_t = 4)]
    n_incorrect: usize,
    #[arg(long, default_value_t = 8)]
    g: usize,
    /// Sampling attempts allowed per needed output.
    #[arg(long, default_value_t = 64)]
    attempts: usize,
    /// Leave out instances that do not yield enough outputs instead of failing.
    #[arg(long)]
    skip_shortfall: bool,
    /// Use `⌊eta·len⌋` tokens even when that is zero.
    #[arg(long)]
    exact_prefix: bool,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    shape: ProbeShape,
    #[arg(long, default_value_t = 0.15)]
    eta: f64,
    /// Also measure recovery after appending each reflection token.
    #[arg(long)]
    intervention: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    shape: ProbeShape,
    /// Comma-separated, ascending.
    #[arg(long, value_delimiter = ',')]
    etas: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories holding metrics.jsonl and summary.json.
    #[arg(long = "run")]
    runs: Vec<PathBuf>,
    /// With --pot, report effectiveness for given figures instead.
    #[arg(long, requires = "pot")]
    aai: Option<f64>,
    #[arg(long, requires = "aai")]
    pot: Option<f64>,
}

#[derive(Args, Debug)]
struct ProbeRemoteArgs {
    /// Endpoint settings (JSON).
    #[arg(long)]
    endpoint_config: PathBuf,
    /// Problems JSONL: `{"id"?, "question", "answer"}` per line.
    #[arg(long)]
    problems: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    eta: f64,
    #[arg(long, default_value_t = 8)]
    g: usize,
    #[arg(long, default_value_t = 4)]
    n_correct: usize,
    #[arg(long, default_value_t = 4)]
    n_incorrect: usize,
    #[arg(long, default_value_t = 64)]
    attempts: usize,
    #[arg(long)]
    skip_shortfall: bool,
    /// Report path; `<out-dir>/probe-remote.json` by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
