//! Run configuration: one JSON document covering every command.

use std::fs;
use std::path::{Path, PathBuf};

use mcfqkd_core::runner::{reference_config, reference_stability, ExperimentConfig, StabilityConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_LMAX_KM: f64 = 250.0;
pub const DEFAULT_STEP_KM: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config field `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(#[from] mcfqkd_core::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Pair ids to simulate (0-2 inner, 3-8 outer).
    pub pairs: Vec<usize>,
    /// Per-basis acquisition written to the timetag files.
    pub acquisition_s: f64,
    /// Write ground_truth.json and keep dark-count flags in the files.
    #[serde(default = "yes")]
    pub ground_truth: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkBudgetConfig {
    pub lmax_km: f64,
    pub step_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub experiment: ExperimentConfig,
    pub stability: StabilityConfig,
    pub simulate: SimulateConfig,
    pub linkbudget: LinkBudgetConfig,
}

impl RunConfig {
    /// Built-in configuration calibrated to the reference operating points.
    pub fn reference() -> Result<Self, ConfigError> {
        let experiment = reference_config()?;
        let stability = reference_stability(&experiment)?;
        Ok(Self {
            seed: DEFAULT_SEED,
            experiment,
            stability,
            simulate: SimulateConfig {
                pairs: vec![0, 1, 2],
                acquisition_s: 1.0,
                ground_truth: true,
            },
            linkbudget: LinkBudgetConfig {
                lmax_km: DEFAULT_LMAX_KM,
                step_km: DEFAULT_STEP_KM,
            },
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| ConfigError::Schema {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        de.end().map_err(|e| ConfigError::Schema {
            field: ".".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The reference config unless a path is given.
    pub fn load_or_reference(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => Self::reference(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.experiment.validate()?;
        self.stability.setup.validate()?;
        let (layout, _) = self.experiment.layout.build()?;
        let n = layout.pairs().len();
        if self.simulate.pairs.is_empty() {
            return Err(mcfqkd_core::Error::EmptyPairSet.into());
        }
        for &id in self.simulate.pairs.iter().chain([&self.stability.pair_id]) {
            if id >= n {
                return Err(mcfqkd_core::Error::UnknownPair(id).into());
            }
        }
        if !(self.simulate.acquisition_s > 0.0 && self.simulate.acquisition_s.is_finite()) {
            return Err(ConfigError::Schema {
                field: "simulate.acquisition_s".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Experiment settings for the simulate command.
    pub fn simulate_experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            acquisition_s: self.simulate.acquisition_s,
            ..self.experiment
        }
    }
}
