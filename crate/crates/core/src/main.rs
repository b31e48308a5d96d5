use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ftlab::commands::{
    command_finetune, command_forgetting, command_pretrain, command_report, command_surface, command_sweep,
};
use ftlab::config::ExperimentConfig;
use ftlab::{LabError, Result};

#[derive(Parser)]
#[command(name = "ftlab", version, about = "Fine-tuning stability laboratory")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the environment root and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent sweep runs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Dotted override `path=value`; repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-LM pre-training from a fresh initialization.
    Pretrain,
    /// One classification fine-tuning run.
    Finetune,
    /// Multi-seed sweep with stability statistics.
    Sweep,
    /// Loss and gradient-norm surfaces between three checkpoints.
    Surface,
    /// Layer-substitution forgetting probe.
    Forgetting,
    /// Summaries and plots for existing artifacts.
    Report {
        /// Directory to scan; defaults to the output directory.
        input: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("sweep.workers={w}"));
    }
    ExperimentConfig::load(common.config.as_deref(), &overrides)
}

fn run(command: Command, common: Common) -> Result<PathBuf> {
    let config = load(&common)?;
    let out = config.output_dir(common.out.as_deref());
    match command {
        Command::Pretrain => command_pretrain(&config, &out),
        Command::Finetune => command_finetune(&config, &out),
        Command::Sweep => command_sweep(&config, &out, config.sweep.workers),
        Command::Surface => command_surface(&config, &out),
        Command::Forgetting => command_forgetting(&config, &out),
        Command::Report { input } => command_report(input.as_deref().unwrap_or(&out), &out),
    }
}

fn error_line(e: &LabError) -> String {
    let message = e.to_string().replace(['\n', '\t'], " ");
    format!("error\tkind={}\tmessage={message}", e.kind())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command, cli.common) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(2)
        }
    }
}
