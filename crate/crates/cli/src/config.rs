//! Run configurations: what a preset expands to and what `config.json` holds.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use coffee_core::ssm::ModelKind;
use coffee_core::tasks::ih::IHConfig;
use coffee_core::tasks::mnist::AugmentConfig;
use coffee_core::train::TrainConfig;

/// Accuracy band a run must land in for `--assert` to succeed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub min_accuracy: f64,
    #[serde(default)]
    pub max_accuracy: Option<f64>,
}

impl Expectation {
    pub fn at_least(min: f64) -> Self {
        Self { min_accuracy: min, max_accuracy: None }
    }

    pub fn within(center: f64, tol: f64) -> Self {
        Self { min_accuracy: center - tol, max_accuracy: Some(center + tol) }
    }

    pub fn holds(&self, acc: f64) -> bool {
        acc >= self.min_accuracy && self.max_accuracy.map_or(true, |m| acc <= m)
    }
}

/// Published loss and accuracy a run is compared against in reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhRun {
    #[serde(default)]
    pub preset: Option<String>,
    pub model: ModelKind,
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(default)]
    pub output_filter: bool,
    #[serde(default)]
    pub frozen_row: Option<usize>,
    #[serde(default)]
    pub squared_distance: bool,
    pub ih: IHConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub expect: Option<Expectation>,
    #[serde(default)]
    pub reference: Option<Reference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRun {
    #[serde(default)]
    pub preset: Option<String>,
    /// `None` drops the SSM layer (sequential variant only).
    pub model: Option<ModelKind>,
    pub n: usize,
    #[serde(default)]
    pub output_filter: bool,
    pub augment: AugmentConfig,
    pub val_size: usize,
    /// Use only the first this many training images.
    #[serde(default)]
    pub train_limit: Option<usize>,
    pub train: TrainConfig,
    #[serde(default)]
    pub expect: Option<Expectation>,
    #[serde(default)]
    pub reference: Option<Reference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum RunConfig {
    Ih(IhRun),
    Mnist(ImageRun),
    Smnist(ImageRun),
}

impl RunConfig {
    pub fn task(&self) -> &'static str {
        match self {
            RunConfig::Ih(_) => "ih",
            RunConfig::Mnist(_) => "mnist",
            RunConfig::Smnist(_) => "smnist",
        }
    }

    pub fn train_mut(&mut self) -> &mut TrainConfig {
        match self {
            RunConfig::Ih(r) => &mut r.train,
            RunConfig::Mnist(r) | RunConfig::Smnist(r) => &mut r.train,
        }
    }

    pub fn train(&self) -> &TrainConfig {
        match self {
            RunConfig::Ih(r) => &r.train,
            RunConfig::Mnist(r) | RunConfig::Smnist(r) => &r.train,
        }
    }

    pub fn preset(&self) -> Option<&str> {
        match self {
            RunConfig::Ih(r) => r.preset.as_deref(),
            RunConfig::Mnist(r) | RunConfig::Smnist(r) => r.preset.as_deref(),
        }
    }

    pub fn expect(&self) -> Option<Expectation> {
        match self {
            RunConfig::Ih(r) => r.expect,
            RunConfig::Mnist(r) | RunConfig::Smnist(r) => r.expect,
        }
    }

    /// Every check that does not need data or compute.
    pub fn validate(&self) -> Result<()> {
        self.train().validate()?;
        match self {
            RunConfig::Ih(r) => {
                r.ih.validate()?;
                if r.n == 0 || r.d == 0 {
                    bail!("n and D must be positive");
                }
                if r.output_filter && r.model != ModelKind::Coffee {
                    bail!("output_filter is only available for the coffee model");
                }
                let m = r.ih.vocab()?.len();
                if let Some(row) = r.frozen_row {
                    if row >= m {
                        bail!("frozen_row {row} is outside the {m}-symbol vocabulary");
                    }
                }
                if r.model != ModelKind::S6 && m > r.d {
                    bail!(
                        "the orthonormal embedding init needs |M| <= D, got |M| = {m} and D = {}",
                        r.d
                    );
                }
            }
            RunConfig::Mnist(r) | RunConfig::Smnist(r) => {
                if r.n == 0 {
                    bail!("n must be positive");
                }
                if r.model.is_none() && matches!(self, RunConfig::Mnist(_)) {
                    bail!("the four-view MNIST model needs an SSM kind");
                }
                if r.output_filter && r.model != Some(ModelKind::Coffee) {
                    bail!("output_filter is only available for the coffee model");
                }
                if r.output_filter && matches!(self, RunConfig::Smnist(_)) {
                    bail!("output_filter is not wired into the sequential model");
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("config is not a valid run configuration")
    }
}
