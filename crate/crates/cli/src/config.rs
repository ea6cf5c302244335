//! Layered configuration: defaults, then a JSON config file, then CLI flags.
//!
//! The file is a flat document with sections mirroring the library modules;
//! unknown keys are rejected with the offending key named. Every resolved
//! run embeds its full configuration in the result file, so outputs are
//! reproducible from `(command line, seed)` alone.

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use lsa_lab::numerics::{sample_spd, RngStream};
use lsa_lab::tasks::{Activation, MlpTargetSpec, TaskSpec};
use lsa_lab::training::{Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Stream index reserved for drawing the skewed covariance from the seed.
const SIGMA_DRAW_SPLIT: u64 = 0xC0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKindArg {
    Isotropic,
    Skewed,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationArg {
    Tanh,
    Relu,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Relu => Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Adam,
    PlainGd,
}

impl From<OptimizerArg> for Optimizer {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::PlainGd => Optimizer::PlainGd,
        }
    }
}

/// Task flags shared by `gen`, `train`, and `eta`.
#[derive(Debug, Clone, Default, Args)]
pub struct TaskArgs {
    /// Prompt distribution family.
    #[arg(long, value_enum)]
    pub task: Option<TaskKindArg>,
    /// Input dimension (>= 1).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub d: Option<u64>,
    /// Support examples per prompt (>= 1).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: Option<u64>,
    /// Label noise standard deviation (>= 0).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Smallest covariance eigenvalue (skewed task; > 0).
    #[arg(long)]
    pub eig_min: Option<f64>,
    /// Largest covariance eigenvalue (skewed task).
    #[arg(long)]
    pub eig_max: Option<f64>,
    /// MLP layer widths, comma separated, e.g. 5,16,1 (nonlinear task).
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<u64>>,
    /// MLP activation (nonlinear task).
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
}

/// Training flags for `train`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Optimizer step size (>= 0; 0 leaves parameters frozen).
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    /// Parameter init scale; defaults to 0.1/sqrt(d+1).
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Train the reduced (w, M) parameterization directly.
    #[arg(long)]
    pub reduced: bool,
}

// --- config file ------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub task: TaskSection,
    pub train: TrainSection,
    pub mc: McSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub task: Option<TaskKindArg>,
    pub d: Option<u64>,
    pub n: Option<u64>,
    pub sigma: Option<f64>,
    pub eig_min: Option<f64>,
    pub eig_max: Option<f64>,
    pub widths: Option<Vec<u64>>,
    pub activation: Option<ActivationArg>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub optimizer: Option<OptimizerArg>,
    pub step_size: Option<f64>,
    pub steps: Option<u64>,
    pub batch_size: Option<u64>,
    pub init_scale: Option<f64>,
    pub reduced: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub samples: Option<u64>,
    pub probes: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| anyhow!("config file {}: {e}", path.display()))
    }
}

// --- resolved task -----------------------------------------------------------

/// Fully resolved task parameters; serialized into every result file.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTask {
    pub task: TaskKindArg,
    pub d: usize,
    pub n: usize,
    pub sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eig_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eig_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationArg>,
}

impl ResolvedTask {
    /// Merge flag > file > default for every task field.
    pub fn resolve(flags: &TaskArgs, file: &TaskSection) -> anyhow::Result<Self> {
        let task = flags.task.or(file.task).unwrap_or(TaskKindArg::Isotropic);
        let d = flags.d.or(file.d).unwrap_or(5) as usize;
        let n = flags.n.or(file.n).unwrap_or(20) as usize;
        let sigma = flags.sigma.or(file.sigma).unwrap_or(0.5);
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(anyhow!("sigma must be finite and >= 0, got {sigma}"));
        }
        let (eig_min, eig_max, widths, activation) = match task {
            TaskKindArg::Isotropic => (None, None, None, None),
            TaskKindArg::Skewed => {
                let lo = flags.eig_min.or(file.eig_min).unwrap_or(0.25);
                let hi = flags.eig_max.or(file.eig_max).unwrap_or(4.0);
                if !(lo > 0.0 && lo <= hi) {
                    return Err(anyhow!(
                        "eig_min/eig_max must satisfy 0 < eig_min <= eig_max, got [{lo}, {hi}]"
                    ));
                }
                (Some(lo), Some(hi), None, None)
            }
            TaskKindArg::Nonlinear => {
                let widths: Vec<usize> = flags
                    .widths
                    .clone()
                    .or_else(|| file.widths.clone())
                    .unwrap_or_else(|| vec![d as u64, 16, 1])
                    .into_iter()
                    .map(|w| w as usize)
                    .collect();
                if widths.first() != Some(&d) {
                    return Err(anyhow!(
                        "widths must start with d = {d}, got {:?}",
                        widths
                    ));
                }
                let act = flags.activation.or(file.activation).unwrap_or(ActivationArg::Tanh);
                (None, None, Some(widths), Some(act))
            }
        };
        Ok(Self { task, d, n, sigma, eig_min, eig_max, widths, activation })
    }

    /// Build the library task spec; the skewed covariance is drawn
    /// deterministically from the seed.
    pub fn to_spec(&self, seed: u64) -> anyhow::Result<TaskSpec> {
        let spec = match self.task {
            TaskKindArg::Isotropic => TaskSpec::isotropic(self.d, self.n, self.sigma)?,
            TaskKindArg::Skewed => {
                let stream = RngStream::new(seed).split(SIGMA_DRAW_SPLIT);
                let sigma_mat =
                    sample_spd(self.d, self.eig_min.unwrap(), self.eig_max.unwrap(), &stream)?;
                TaskSpec::skewed(sigma_mat, self.n, self.sigma)?
            }
            TaskKindArg::Nonlinear => {
                let target = MlpTargetSpec::new(
                    self.widths.clone().unwrap(),
                    self.activation.unwrap().into(),
                )?;
                TaskSpec::nonlinear(target, self.n, self.sigma)?
            }
        };
        Ok(spec)
    }
}

/// Resolved training parameters.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTrain {
    pub optimizer: OptimizerArg,
    pub step_size: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub init_scale: f64,
    pub reduced: bool,
}

impl ResolvedTrain {
    pub fn resolve(flags: &TrainArgs, file: &TrainSection, d: usize) -> anyhow::Result<Self> {
        let defaults = TrainConfig::adam_default(d, 0);
        let step_size = flags.step_size.or(file.step_size).unwrap_or(defaults.step_size);
        if !(step_size >= 0.0 && step_size.is_finite()) {
            return Err(anyhow!("step_size must be finite and >= 0, got {step_size}"));
        }
        let init_scale = flags.init_scale.or(file.init_scale).unwrap_or(defaults.init_scale);
        if !(init_scale > 0.0 && init_scale.is_finite()) {
            return Err(anyhow!("init_scale must be finite and > 0, got {init_scale}"));
        }
        Ok(Self {
            optimizer: flags.optimizer.or(file.optimizer).unwrap_or(OptimizerArg::Adam),
            step_size,
            steps: flags.steps.or(file.steps).unwrap_or(defaults.steps as u64) as usize,
            batch_size: flags
                .batch_size
                .or(file.batch_size)
                .unwrap_or(defaults.batch_size as u64) as usize,
            init_scale,
            reduced: flags.reduced || file.reduced.unwrap_or(false),
        })
    }

    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer.into(),
            step_size: self.step_size,
            steps: self.steps,
            batch_size: self.batch_size,
            init_scale: self.init_scale,
            seed,
            reduced: self.reduced,
        }
    }
}
