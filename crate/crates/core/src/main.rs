use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use topk_lab::harness::{run_command, Command, ExperimentConfig};
use topk_lab::LabError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Train,
    SweepRatio,
    SweepPrecision,
    IndexerStats,
    EntropyCompare,
    GenTasks,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::SweepRatio => Command::SweepRatio,
            Cmd::SweepPrecision => Command::SweepPrecision,
            Cmd::IndexerStats => Command::IndexerStats,
            Cmd::EntropyCompare => Command::EntropyCompare,
            Cmd::GenTasks => Command::GenTasks,
        }
    }
}

/// Top-k attention experiments on a toy decoder.
#[derive(Debug, Parser)]
#[command(name = "topk-lab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment seed (overrides `seed`; also replaces `train.seeds`).
    #[arg(long)]
    seed: Option<u64>,
    /// Write attention traces alongside the results.
    #[arg(long)]
    capture: bool,
}

fn configure_threads() -> Result<(), LabError> {
    let Ok(v) = std::env::var("TOPK_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| LabError::Config(format!("TOPK_LAB_THREADS must be an integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| LabError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), LabError> {
    configure_threads()?;
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        if let Some(t) = cfg.train.as_mut() {
            t.seeds = vec![seed];
        }
    }
    cfg.capture |= cli.capture;
    let out = cli.out.unwrap_or_else(|| cfg.output_dir());
    for path in run_command(cli.command.into(), &cfg, &out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
