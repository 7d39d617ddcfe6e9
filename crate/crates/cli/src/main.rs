use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neurossm::config::ExperimentConfig;
use neurossm::ExecPolicy;
use neurossm_cli::commands::{self, cost_file_overrides};
use neurossm_cli::error::{CliError, EXIT_USAGE};
use neurossm_cli::Context;

#[derive(Parser)]
#[command(name = "neurossm", version, about = "Diagonal SSM classifiers: training, fixed-point quantization and neurocore simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Cost-model file (flat keys: cost parameters, `schedule`, `period`).
    #[arg(long)]
    cost_file: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Data directory (defaults to $NEUROSSM_DATA, then ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
    /// No progress output on stderr.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision network.
    Train(Common),
    /// Post-training quantization of the trained network.
    Ptq(Common),
    /// Quantization-aware fine-tuning of the PTQ network.
    Qaft(Common),
    /// Accuracy of every available stage in convolution and streaming mode.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate a freshly initialized network instead of checkpoints.
        #[arg(long)]
        untrained: bool,
    },
    /// Run test samples through the neurocore simulator.
    Simulate(Common),
    /// Energy, latency, throughput and EDP under both injection schedules.
    Bench(Common),
    /// Fit the step-cost model to measured rows.
    FitCost {
        #[command(flatten)]
        common: Common,
        /// CSV of measured rows (same columns as `bench` output).
        #[arg(long, default_value = "configs/loihi2_measured.csv")]
        targets: PathBuf,
    },
}

fn context(c: &Common) -> Result<Context, CliError> {
    let mut overrides = match &c.cost_file {
        Some(p) => cost_file_overrides(p)?,
        None => Vec::new(),
    };
    overrides.extend(c.overrides.iter().cloned());
    if let Some(o) = &c.output {
        overrides.push(format!("output_dir={}", toml::Value::String(o.display().to_string())));
    }
    let cfg = ExperimentConfig::load(c.config.as_deref(), &overrides)?;
    let policy = if c.sequential { ExecPolicy::Sequential } else { ExecPolicy::Parallel };
    let mut ctx = Context::new(cfg, c.data_dir.as_deref(), policy);
    ctx.quiet = c.quiet;
    Ok(ctx)
}

fn dispatch(cmd: &Command) -> Result<serde_json::Value, CliError> {
    match cmd {
        Command::Train(c) => commands::cmd_train(&context(c)?),
        Command::Ptq(c) => commands::cmd_ptq(&context(c)?),
        Command::Qaft(c) => commands::cmd_qaft(&context(c)?),
        Command::Eval { common, untrained } => commands::cmd_eval(&context(common)?, *untrained),
        Command::Simulate(c) => commands::cmd_simulate(&context(c)?),
        Command::Bench(c) => commands::cmd_bench(&context(c)?),
        Command::FitCost { common, targets } => commands::cmd_fit_cost(&context(common)?, targets),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(&cli.command) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report["results"]).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
