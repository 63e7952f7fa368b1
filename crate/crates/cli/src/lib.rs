//! Config-driven experiments on top of `funcito`.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub use commands::Outcome;
pub use config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    CheckIto,
    CheckKbe,
    Compare,
    Probe,
}

/// Applies command-line overrides and runs one command, writing into the
/// resolved output directory. An `--out` override is not copied into the
/// embedded config, so reports do not depend on where they are written.
pub fn run(command: Command, mut cfg: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) -> Result<Outcome> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.validate()?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    dispatch(command, &cfg, &out)
}

fn dispatch(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    match command {
        Command::Simulate => commands::simulate(cfg, out),
        Command::CheckIto => commands::check_ito(cfg, out),
        Command::CheckKbe => commands::check_kbe(cfg, out),
        Command::Compare => commands::compare(cfg, out),
        Command::Probe => commands::probe(cfg, out),
    }
}
