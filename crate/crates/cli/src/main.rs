mod commands;
mod config;
mod outdir;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "gfnet",
    about = "Glance-and-focus adaptive classification: staged training, budget calibration, evaluation, sweeps, and trace dumps",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// Run configuration file (TOML); defaults to $GF_CONFIG, then builtins.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory override (expects <split>.gfds files).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the staged training pipeline.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Stage to run: 0, 1, 2, 3, or all (later stages need the
        /// previous stage's checkpoint).
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Evaluate a checkpoint in full, anytime, or budgeted mode.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// full | anytime | budgeted
        #[arg(long, default_value = "full")]
        mode: String,
        /// Exit step for anytime mode.
        #[arg(long)]
        t_star: Option<usize>,
        /// Per-sample budget (multiply-adds) for budgeted mode.
        #[arg(long)]
        budget: Option<f64>,
        /// learned | random | centre-corner
        #[arg(long, default_value = "learned")]
        policy: String,
        /// Seed for the random patch policy.
        #[arg(long, default_value_t = 0)]
        policy_seed: u64,
        /// Split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Split used to calibrate thresholds (budgeted mode).
        #[arg(long)]
        calibrate_on: Option<String>,
        /// Worker lanes; 0 = library default.
        #[arg(long)]
        concurrency: Option<usize>,
        /// Also measure single-lane per-step latency with this many reps.
        #[arg(long)]
        latency_reps: Option<usize>,
    },
    /// Accuracy-versus-cost curve over a list of budgets.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated budgets, or "auto" for log-spaced points.
        #[arg(long, default_value = "auto")]
        budgets: String,
        /// Number of auto budgets.
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        calibrate_on: Option<String>,
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Dump per-step traces (locations, confidences, patch windows).
    Trace {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated sample ids.
        #[arg(long)]
        ids: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// learned | random | centre-corner
        #[arg(long, default_value = "learned")]
        policy: String,
        #[arg(long, default_value_t = 0)]
        policy_seed: u64,
    },
    /// Produce <split>.gfds dataset files.
    ConvertDataset {
        #[command(subcommand)]
        source: commands::ConvertSource,
    },
    /// Solve the exit distribution for a budget.
    SolveBudget {
        /// Per-sample budget.
        #[arg(long)]
        budget: f64,
        /// Comma-separated cumulative per-step costs.
        #[arg(long)]
        costs: Option<String>,
        /// Checkpoint whose analytic cost model should be used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, stage } => commands::train(&common, &stage),
        Command::Eval {
            common,
            checkpoint,
            mode,
            t_star,
            budget,
            policy,
            policy_seed,
            split,
            calibrate_on,
            concurrency,
            latency_reps,
        } => commands::eval(commands::EvalArgs {
            common,
            checkpoint,
            mode,
            t_star,
            budget,
            policy,
            policy_seed,
            split,
            calibrate_on,
            concurrency,
            latency_reps,
        }),
        Command::Sweep {
            common,
            checkpoint,
            budgets,
            points,
            split,
            calibrate_on,
            concurrency,
        } => commands::sweep(commands::SweepArgs {
            common,
            checkpoint,
            budgets,
            points,
            split,
            calibrate_on,
            concurrency,
        }),
        Command::Trace {
            common,
            checkpoint,
            ids,
            split,
            policy,
            policy_seed,
        } => commands::trace(&common, &checkpoint, &ids, &split, &policy, policy_seed),
        Command::ConvertDataset { source } => commands::convert_dataset(source),
        Command::SolveBudget {
            budget,
            costs,
            checkpoint,
        } => commands::solve_budget(budget, costs.as_deref(), checkpoint.as_deref()),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

pub(crate) use config::resolve;

impl CommonArgs {
    fn resolve(&self) -> anyhow::Result<config::RunConfig> {
        resolve(
            self.config.as_deref(),
            self.seed,
            self.dataset.as_deref(),
            self.out.as_deref(),
        )
    }
}
