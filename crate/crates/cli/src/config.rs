//! Run configuration: TOML file defaults, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use dime::dime::{DimeConfig, Rq1Thresholds};
use dime::gateway::{SessionOptions, TrainConfig, SYNTHETIC_LAYOUT};
use dime::surrogate::{GridSpec, SurrogateConfig};

/// Where model outputs come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ModelSource {
    /// The in-process MLP, loaded from a weights file.
    Builtin,
    /// A child process speaking the JSON-lines protocol.
    Command(String),
}

impl std::str::FromStr for ModelSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "builtin" {
            return Ok(Self::Builtin);
        }
        match s.strip_prefix("cmd:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(Self::Command(cmd.to_string())),
            _ => Err(format!("model must be `builtin` or `cmd:<command>`, got {s:?}")),
        }
    }
}

impl TryFrom<String> for ModelSource {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ModelSource> for String {
    fn from(m: ModelSource) -> String {
        match m {
            ModelSource::Builtin => "builtin".into(),
            ModelSource::Command(c) => format!("cmd:{c}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub final_lr_fraction: f64,
    /// `train` exits with status 1 below this test accuracy.
    pub accuracy_floor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            final_lr_fraction: t.final_lr_fraction,
            accuracy_floor: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub lime_samples: usize,
    pub keep_prob: f64,
    pub kernel_width: f64,
    pub lambda: f64,
    pub workers: usize,
    pub model: ModelSource,
    /// Weights file for the builtin model.
    pub weights: Option<PathBuf>,
    pub grid: Option<GridSpec>,
    pub handshake_timeout_secs: f64,
    pub request_timeout_secs: f64,
    pub train: TrainSection,
    pub thresholds: Rq1Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DimeConfig::default();
        let opts = SessionOptions::default();
        Self {
            seed: d.seed,
            n_samples: d.n_samples,
            lime_samples: d.surrogate.samples,
            keep_prob: d.surrogate.keep_prob,
            kernel_width: d.surrogate.kernel_width,
            lambda: d.surrogate.lambda,
            workers: d.workers,
            model: ModelSource::Builtin,
            weights: None,
            grid: None,
            handshake_timeout_secs: opts.handshake_timeout.as_secs_f64(),
            request_timeout_secs: opts.request_timeout.as_secs_f64(),
            train: TrainSection::default(),
            thresholds: Rq1Thresholds::default(),
        }
    }
}

/// Flags shared by every command; each one overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// TOML file with run defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sample-set size N for disentanglement.
    #[arg(long, global = true)]
    pub n_samples: Option<usize>,
    /// Perturbations per surrogate explanation.
    #[arg(long, global = true)]
    pub lime_samples: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub kernel_width: Option<f64>,
    #[arg(long, global = true)]
    pub keep_prob: Option<f64>,
    /// `builtin` or `cmd:"<shell command>"`.
    #[arg(long, global = true)]
    pub model: Option<ModelSource>,
    /// Weights file for the builtin model.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_toml(path)?,
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        over!(seed, n_samples, lime_samples, lambda, kernel_width, keep_prob, model, workers);
        if let Some(w) = &self.weights {
            cfg.weights = Some(w.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("--out <dir> is required for this command")
    }
}

fn load_toml(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dime().validate()?;
        if !(self.handshake_timeout_secs > 0.0 && self.request_timeout_secs > 0.0) {
            bail!("timeouts must be positive");
        }
        if !(0.0..=1.0).contains(&self.train.accuracy_floor) {
            bail!("accuracy_floor must be in [0, 1]");
        }
        Ok(())
    }

    pub fn dime(&self) -> DimeConfig {
        DimeConfig {
            seed: self.seed,
            n_samples: self.n_samples,
            surrogate: SurrogateConfig {
                samples: self.lime_samples,
                keep_prob: self.keep_prob,
                kernel_width: self.kernel_width,
                lambda: self.lambda,
            },
            grid: self.grid,
            workers: self.workers,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            final_lr_fraction: self.train.final_lr_fraction,
            layout: SYNTHETIC_LAYOUT.to_vec(),
        }
    }

    pub fn session_options(&self) -> SessionOptions {
        SessionOptions {
            handshake_timeout: std::time::Duration::from_secs_f64(self.handshake_timeout_secs),
            request_timeout: std::time::Duration::from_secs_f64(self.request_timeout_secs),
            ..SessionOptions::default()
        }
    }
}
