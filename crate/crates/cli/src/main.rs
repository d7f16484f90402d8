mod config;
mod presets;
mod report;
mod rundir;
mod tools;
mod training;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "coffee", version, about = "State-feedback selective SSMs: training, checks and reports")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration (as written to config.json by a previous run).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named experiment configuration.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file, for commands that write one artifact).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// One thread, fixed reduction order and zeroed wall-clock columns.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Exit nonzero unless the run meets its accuracy expectation.
    #[arg(long = "assert", global = true)]
    pub assert: bool,
    /// Request 32-bit arithmetic (not supported; all computation is f64).
    #[arg(long, global = true)]
    pub f32: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the induction-head task.
    TrainIh(training::TrainArgs),
    /// Train the four-view MNIST classifier (data from --data or COFFEE_MNIST_DIR).
    TrainMnist(training::TrainArgs),
    /// Train the sequential-pixel MNIST baseline.
    TrainSmnist(training::TrainArgs),
    /// Evaluate a checkpoint.
    Eval(training::EvalArgs),
    /// Compare backward passes against finite differences.
    Gradcheck(tools::GradcheckArgs),
    /// Print the toy model's state after every token.
    Ih0Trace(tools::Ih0TraceArgs),
    /// Learn the toy model's six embedding entries.
    Ih0Train(tools::Ih0TrainArgs),
    /// Canonicalize a COFFEE checkpoint and verify the outputs are unchanged.
    Canon(tools::CanonArgs),
    /// Check the parallel scan and fixed-point evaluation against sequential runs.
    ScanCheck(tools::ScanCheckArgs),
    /// Write generated induction-head samples, one `tokens;target` per line.
    GenIh(tools::GenIhArgs),
    /// Print learnable parameter counts.
    CountParams(tools::CountArgs),
    /// Aggregate run directories into markdown and CSV tables.
    Report(report::ReportArgs),
}

fn run(cli: Cli) -> Result<bool> {
    if cli.common.f32 {
        bail!("--f32 is not supported: every computation in this build is 64-bit (drop the flag)");
    }
    let c = &cli.common;
    match cli.command {
        Command::TrainIh(a) => training::train_ih_cmd(c, &a),
        Command::TrainMnist(a) => training::train_image_cmd(c, &a, false),
        Command::TrainSmnist(a) => training::train_image_cmd(c, &a, true),
        Command::Eval(a) => training::eval_cmd(c, &a),
        Command::Gradcheck(a) => tools::gradcheck_cmd(c, &a),
        Command::Ih0Trace(a) => tools::ih0_trace_cmd(c, &a),
        Command::Ih0Train(a) => tools::ih0_train_cmd(c, &a),
        Command::Canon(a) => tools::canon_cmd(c, &a),
        Command::ScanCheck(a) => tools::scan_check_cmd(c, &a),
        Command::GenIh(a) => tools::gen_ih_cmd(c, &a),
        Command::CountParams(a) => tools::count_cmd(c, &a),
        Command::Report(a) => report::report_cmd(c, &a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
