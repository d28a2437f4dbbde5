//! `subcurr`: validate trajectories, build curricula, emit datasets and
//! analyse agent runs.
//!
//! Every subcommand prints a JSON report on stdout and a human-readable
//! summary on stderr. Exit codes: 0 success, 1 validation or verification
//! failures, 2 input/schema/IO or usage errors, 3 endpoint failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use subcurr_core::cost::Effectiveness;
use subcurr_core::curriculum::{DecrementMode, Strategy};
use subcurr_core::masking::HistoryMode;

#[derive(Debug, Parser)]
#[command(name = "subcurr", version, about = "Curriculum datasets and cost analysis for multi-agent trajectories")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub run_config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check trajectories against budgets and structural rules.
    Validate(ValidateArgs),
    /// Print the per-epoch subtask sets for one task shape.
    Schedule(ScheduleArgs),
    /// Write per-role, per-epoch JSONL training files.
    Emit(EmitArgs),
    /// TGC, SGC and per-position error rates of a run log.
    Metrics(MetricsArgs),
    /// Cost/effectiveness Pareto front.
    Pareto(ParetoArgs),
    /// Convert single-agent trajectories through a chat endpoint.
    Convert(ConvertArgs),
    /// Token statistics of a run log.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Trajectory file or directory of `*.json` trajectories.
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub max_subtasks: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub subtasks: usize,
    /// Comma-separated kinds (login, ts, completion, other); defaults to
    /// login first, completion last, task-specific in between.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "mirror")]
    pub decrement_mode: DecrementModeArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum DecrementModeArg {
    Mirror,
    DropTail,
}

impl From<DecrementModeArg> for DecrementMode {
    fn from(v: DecrementModeArg) -> Self {
        match v {
            DecrementModeArg::Mirror => DecrementMode::Mirror,
            DecrementModeArg::DropTail => DecrementMode::DropTail,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum HistoryModeArg {
    PerSubtask,
    FullTask,
}

impl From<HistoryModeArg> for HistoryMode {
    fn from(v: HistoryModeArg) -> Self {
        match v {
            HistoryModeArg::PerSubtask => HistoryMode::PerSubtask,
            HistoryModeArg::FullTask => HistoryMode::FullTask,
        }
    }
}

#[derive(Debug, Args)]
pub struct EmitArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "full-task")]
    pub history_mode: HistoryModeArg,
    #[arg(long, value_enum, default_value = "mirror")]
    pub decrement_mode: DecrementModeArg,
    /// Extra error patterns, one regex per line.
    #[arg(long)]
    pub patterns: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub min_successful: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ParetoArgs {
    /// Cost points as CSV (`.csv`) or a JSON array.
    #[arg(long, conflicts_with_all = ["runs", "config"])]
    pub points: Option<PathBuf>,
    /// Run logs, one per system, in the same order as the system configs.
    #[arg(long, value_delimiter = ',', requires = "config")]
    pub runs: Option<Vec<PathBuf>>,
    /// System config JSON (one object or an array).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "tgc")]
    pub effectiveness: Effectiveness,
    /// Also write the points with front membership as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub endpoint_config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Example multi-agent trajectory inserted into the prompt.
    #[arg(long)]
    pub exemplar: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub runs: PathBuf,
    /// Also report per-position error rates of a training corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub patterns: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
