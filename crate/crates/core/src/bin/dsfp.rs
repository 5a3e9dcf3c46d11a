use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dsfp::harness::{run_stage, HarnessError, RunConfig, Stage};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Train,
    Score,
    Tune,
    Prune,
    Distill,
    Report,
    Pipeline,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Self {
        match c {
            Command::Train => Stage::Train,
            Command::Score => Stage::Score,
            Command::Tune => Stage::Tune,
            Command::Prune => Stage::Prune,
            Command::Distill => Stage::Distill,
            Command::Report => Stage::Report,
            Command::Pipeline => Stage::Pipeline,
        }
    }
}

/// Structured filter pruning with fused sensitivity scoring.
#[derive(Debug, Parser)]
#[command(name = "dsfp", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (flat key = value file).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let text = fs::read_to_string(&cli.config)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", cli.config.display())))?;
    let mut cfg = RunConfig::parse_with_seed(&text, cli.seed)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    run_stage(cli.command.into(), &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dsfp {}: {e}", Stage::from(cli.command).name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
