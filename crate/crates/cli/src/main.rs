use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use funcito_cli::{run, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "funcito", version, about = "Functional Itô calculus experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Simulate paths and write CSV files plus a manifest.
    Simulate,
    /// Itô formula residuals over a ladder of grid sizes.
    CheckIto,
    /// Backward equation residual profile of a valuation.
    CheckKbe,
    /// Hypotheses and conclusion of a comparison scenario.
    Compare,
    /// Derivatives and vertical convexity/monotonicity probes.
    Probe,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(failures) if failures.is_empty() => ExitCode::SUCCESS,
        Ok(failures) => {
            for f in failures {
                eprintln!("FAILED {f}");
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main(cli: Cli) -> Result<Vec<String>> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let path = cli
        .config
        .ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let cfg = ExperimentConfig::load(&path)?;
    let command = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::CheckIto => Command::CheckIto,
        Cmd::CheckKbe => Command::CheckKbe,
        Cmd::Compare => Command::Compare,
        Cmd::Probe => Command::Probe,
    };
    let outcome = run(command, cfg, cli.out, cli.seed)?;
    for f in &outcome.files {
        println!("{}", f.display());
    }
    Ok(outcome.failures)
}
