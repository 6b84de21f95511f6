//! Workbench binary tying the core crate to the filesystem: dataset
//! generation, training, adaptation and report generation, each driven by
//! one run config with flag overrides.
//!
//! Exit codes: 0 on success, 2 for configuration and i/o problems, 3 when
//! optimisation diverges.

mod ckpt;
mod config;
mod datadir;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vcd_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(CoreError::Diverged { .. }) => 3,
            _ => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "vcd", version, about = "Causal world-model workbench")]
struct Cli {
    /// Directory all relative input and output paths resolve under.
    #[arg(long, env = "VCD_OUT_ROOT", default_value = ".", global = true)]
    out_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a dataset of intervened environments.
    Generate(run::GenerateArgs),
    /// Fit a model variant to a dataset.
    Train(run::TrainArgs),
    /// Fit one new environment starting from a trained checkpoint.
    Adapt(run::AdaptArgs),
    /// Score a checkpoint into rollout, disentanglement and recovery reports.
    Eval(run::EvalArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.out_root.clone();
    let result = match &cli.cmd {
        Cmd::Generate(a) => run::cmd_generate(a, &root),
        Cmd::Train(a) => run::cmd_train(a, &root),
        Cmd::Adapt(a) => run::cmd_adapt(a, &root),
        Cmd::Eval(a) => run::cmd_eval(a, &root),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
