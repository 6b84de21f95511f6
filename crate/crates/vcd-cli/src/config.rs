//! One configuration file covers all four commands. Every field has a
//! default matching the benchmark protocol; unknown keys are rejected.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vcd_core::dataset::GenConfig;
use vcd_core::training::TrainConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vcd,
    Rssm,
    MultiRssm,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vcd => "vcd",
            Variant::Rssm => "rssm",
            Variant::MultiRssm => "multi-rssm",
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: GenConfig,
    pub train: TrainSection,
    pub adapt: AdaptSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub variant: Variant,
    pub steps: usize,
    pub lr: f64,
    pub batch_per_env: usize,
    pub lambda_graph: f64,
    pub lambda_regime: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSection {
            variant: Variant::Vcd,
            steps: c.steps,
            lr: c.lr,
            batch_per_env: c.batch_per_env,
            lambda_graph: c.lambda_graph,
            lambda_regime: c.lambda_regime,
            grad_clip: c.grad_clip,
            seed: c.seed,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch_per_env: self.batch_per_env,
            lambda_graph: self.lambda_graph,
            lambda_regime: self.lambda_regime,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    /// Intervention id of the unseen environment to fit.
    pub intervention: usize,
    /// Trajectories taken from the head of that environment's training split.
    pub n_traj: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            intervention: 12,
            n_traj: 100,
            steps: 1500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Timesteps driven by observations before prediction takes over.
    /// Defaults to half the horizon.
    pub observed: Option<usize>,
    /// Validation trajectories scored per forward pass.
    pub chunk: usize,
    /// Encoded observations behind the sensitivity matrix.
    pub probes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            observed: None,
            chunk: 25,
            probes: 512,
        }
    }
}

/// Config file if given, defaults otherwise. CLI flags are applied on top
/// by each command.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let file = File::open(p)
                .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?;
            serde_json::from_reader(BufReader::new(file))
                .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))
        }
    }
}
