//! The single TOML document that drives every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mfresnet_core::diagnostics::{DepthSweepConfig, DescentProbeConfig};
use mfresnet_core::{Activation, ModelConfig, TailMode, TeacherSpec, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d1: usize,
    pub d2: usize,
    pub activation: Activation,
    /// Radius of the Frobenius ball that holds every `θ`.
    pub r: f64,
    /// Bound on `‖x‖`.
    pub r1: f64,
    /// Bound on `|y|`.
    pub r2: f64,
    pub tail_mode: TailMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d1: 8,
            d2: 8,
            activation: Activation::Tanh,
            r: 10.0,
            r1: 1.0,
            r2: 10.0,
            tail_mode: TailMode::Drop,
        }
    }
}

impl ModelSection {
    /// Identity embedding `w₂ = I` (rectangular when `d1 ≠ d2`) and the
    /// mean-pooling readout.
    pub fn build(&self) -> Result<ModelConfig, CliError> {
        let base = ModelConfig::standard(self.d1, self.d2, self.activation)?;
        let cfg = ModelConfig::new(
            base.w2().clone(),
            base.w1().clone(),
            self.activation,
            self.r,
            self.r1,
            self.r2,
        )?;
        Ok(cfg.with_tail_mode(self.tail_mode))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_train: usize,
    pub n_eval: usize,
    /// Seed for drawing inputs; the teacher has its own seed.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_csv: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_train: 256,
            n_eval: 256,
            seed: 0,
            train_csv: None,
            eval_csv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagSection {
    pub seed: u64,
    /// Samples taken from the front of the training set.
    pub batch_size: usize,
    /// Central-difference step for `gradcheck`.
    pub h: f64,
    pub grad_tol: f64,
    pub scales: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub descent: DescentProbeConfig,
    pub expansion: DepthSweepConfig,
}

impl Default for DiagSection {
    fn default() -> Self {
        DiagSection {
            seed: 0,
            batch_size: 16,
            h: 1e-5,
            grad_tol: 1e-5,
            scales: vec![1e-1, 1e-2, 1e-3, 1e-4],
            lambdas: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
            descent: DescentProbeConfig::default(),
            expansion: DepthSweepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub seeds: Vec<u64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Write `checkpoint_<epoch>.json` every this many epochs; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub teacher: TeacherSpec,
    pub data: DataSection,
    pub diag: DiagSection,
    pub compare: CompareSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Checks every section, naming the offending field on failure.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.build()?;
        self.train.validate()?;
        if self.data.train_csv.is_none() && self.data.n_train == 0 {
            return Err(CliError::Config("data.n_train: must be at least 1".into()));
        }
        if !(self.teacher.noise >= 0.0 && self.teacher.scale >= 0.0) {
            return Err(CliError::Config("teacher: scale and noise must be non-negative".into()));
        }
        if self.diag.batch_size == 0 {
            return Err(CliError::Config("diag.batch_size: must be at least 1".into()));
        }
        if !(1e-7..=1e-3).contains(&self.diag.h) {
            return Err(CliError::Config(format!("diag.h: must lie in [1e-7, 1e-3], got {}", self.diag.h)));
        }
        if self.diag.scales.len() < 2 {
            return Err(CliError::Config("diag.scales: need at least two scales".into()));
        }
        Ok(())
    }

    /// The configuration with the training seed replaced.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }
}
