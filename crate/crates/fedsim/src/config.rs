//! The two decoupled configuration documents: the experiment file
//! (dataset, distribution, federation shape, seed, logging) and the
//! algorithm file (name, model, client and server hyperparameters).
//!
//! Unknown keys are rejected with the offending key named; range errors
//! name the key and the accepted range.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{PartitionSpec, PartitionStrategy};
use crate::error::{Error, Result};
use crate::models::{ModelArchitecture, OptimizerSpec};
use crate::protocol::{EvalScope, LocalWorkSpec, Weighting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Blobs,
    Csv,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

fn default_blob_samples() -> usize {
    1000
}

fn default_blob_features() -> usize {
    20
}

fn default_blob_classes() -> usize {
    2
}

fn default_blob_separation() -> f64 {
    6.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    // synthetic blobs
    #[serde(default = "default_blob_samples")]
    pub n_samples: usize,
    #[serde(default = "default_blob_features")]
    pub n_features: usize,
    #[serde(default = "default_blob_classes")]
    pub n_classes: usize,
    #[serde(default = "default_blob_separation")]
    pub separation: f64,
    // csv
    pub path: Option<PathBuf>,
    pub label_column: Option<String>,
    // train/test split
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_true")]
    pub stratified: bool,
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        match self.source {
            DatasetSource::Blobs => {
                if self.path.is_some() || self.label_column.is_some() {
                    return Err(Error::config(
                        "dataset.path",
                        "only applies to the csv source",
                    ));
                }
                if self.n_samples == 0 || self.n_features == 0 || self.n_classes == 0 {
                    return Err(Error::config(
                        "dataset.n_samples",
                        "blob counts must be positive",
                    ));
                }
                if self.separation < 0.0 {
                    return Err(Error::config(
                        "dataset.separation",
                        "must be non-negative",
                    ));
                }
            }
            DatasetSource::Csv => {
                if self.path.is_none() {
                    return Err(Error::config("dataset.path", "required for the csv source"));
                }
                if self.label_column.is_none() {
                    return Err(Error::config(
                        "dataset.label_column",
                        "required for the csv source",
                    ));
                }
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(
                "dataset.test_fraction",
                format!("must be in (0,1), got {}", self.test_fraction),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Iid,
    DirichletLabel,
    QuantitySkew,
    PathologicalLabel,
    LabelQuantity,
    CovariateShift,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionConfig {
    pub strategy: StrategyName,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub k: Option<usize>,
    pub sigma: Option<f64>,
    /// Defaults to the experiment seed.
    pub seed: Option<u64>,
}

impl DistributionConfig {
    /// Check parameter presence and build the partition spec.
    pub fn to_spec(&self, default_seed: u64) -> Result<PartitionSpec> {
        let require = |value: Option<f64>, key: &str| {
            value.ok_or_else(|| {
                Error::config(
                    format!("distribution.{key}"),
                    format!("required for strategy {:?}", self.strategy),
                )
            })
        };
        let forbid = |absent: bool, key: &str| {
            if absent {
                Ok(())
            } else {
                Err(Error::config(
                    format!("distribution.{key}"),
                    format!("does not apply to strategy {:?}", self.strategy),
                ))
            }
        };
        let strategy = match self.strategy {
            StrategyName::Iid => {
                forbid(self.alpha.is_none(), "alpha")?;
                forbid(self.beta.is_none(), "beta")?;
                forbid(self.k.is_none(), "k")?;
                forbid(self.sigma.is_none(), "sigma")?;
                PartitionStrategy::Iid
            }
            StrategyName::DirichletLabel => {
                forbid(self.beta.is_none(), "beta")?;
                forbid(self.k.is_none(), "k")?;
                forbid(self.sigma.is_none(), "sigma")?;
                PartitionStrategy::DirichletLabel {
                    alpha: require(self.alpha, "alpha")?,
                }
            }
            StrategyName::QuantitySkew => {
                forbid(self.alpha.is_none(), "alpha")?;
                forbid(self.k.is_none(), "k")?;
                forbid(self.sigma.is_none(), "sigma")?;
                PartitionStrategy::QuantitySkew {
                    beta: require(self.beta, "beta")?,
                }
            }
            StrategyName::PathologicalLabel | StrategyName::LabelQuantity => {
                forbid(self.alpha.is_none(), "alpha")?;
                forbid(self.beta.is_none(), "beta")?;
                forbid(self.sigma.is_none(), "sigma")?;
                let k = self.k.ok_or_else(|| {
                    Error::config("distribution.k", "required for this strategy")
                })?;
                if self.strategy == StrategyName::PathologicalLabel {
                    PartitionStrategy::PathologicalLabel {
                        classes_per_client: k,
                    }
                } else {
                    PartitionStrategy::LabelQuantity {
                        classes_per_client: k,
                    }
                }
            }
            StrategyName::CovariateShift => {
                forbid(self.alpha.is_none(), "alpha")?;
                forbid(self.beta.is_none(), "beta")?;
                forbid(self.k.is_none(), "k")?;
                PartitionStrategy::CovariateShift {
                    sigma: require(self.sigma, "sigma")?,
                }
            }
        };
        Ok(PartitionSpec {
            strategy,
            seed: self.seed.unwrap_or(default_seed),
        })
    }
}

fn default_frequency() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_frequency")]
    pub frequency: usize,
    #[serde(default)]
    pub scope: EvalScope,
    /// Weight the client_mean row by client test sizes.
    #[serde(default = "default_true")]
    pub client_mean_weighted: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frequency: 1,
            scope: EvalScope::Server,
            client_mean_weighted: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    #[default]
    Stdout,
    Csv,
    Json,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggerConfig {
    #[serde(default)]
    pub format: LogFormat,
    pub path: Option<PathBuf>,
}

/// The experiment document: everything independent of the algorithm.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub distribution: DistributionConfig,
    pub n_clients: usize,
    pub n_rounds: usize,
    pub eligibility: f64,
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub logger: LoggerConfig,
    /// Accepted for schema compatibility and ignored (no GPU support).
    pub device: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.distribution.to_spec(self.seed)?;
        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be at least 1"));
        }
        if self.n_rounds == 0 {
            return Err(Error::config("n_rounds", "must be at least 1"));
        }
        if !(self.eligibility > 0.0 && self.eligibility <= 1.0) {
            return Err(Error::config(
                "eligibility",
                format!("must be in (0,1], got {}", self.eligibility),
            ));
        }
        if self.eval.frequency == 0 {
            return Err(Error::config("eval.frequency", "must be at least 1"));
        }
        Ok(())
    }
}

/// Client-side hyperparameters. `mu` is the proximal coefficient and only
/// meaningful for algorithms that use it.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientHyperparams {
    #[serde(default)]
    pub local: LocalWorkSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerOptimizerKind {
    Momentum,
    Adam,
}

/// Server-side hyperparameters; which of these apply is checked by the
/// resolved algorithm descriptor.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerHyperparams {
    pub learning_rate: Option<f64>,
    pub weighting: Option<Weighting>,
    pub optimizer: Option<ServerOptimizerKind>,
    pub momentum: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
}

/// The algorithm document: which algorithm, which model, and the
/// hyperparameters on both sides.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub name: String,
    pub model: ModelArchitecture,
    #[serde(default)]
    pub client: ClientHyperparams,
    #[serde(default)]
    pub server: ServerHyperparams,
}

impl AlgorithmConfig {
    /// Structural checks independent of the algorithm.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.client.local.validate()?;
        self.client.optimizer.validate()?;
        if let Some(mu) = self.client.mu {
            if mu < 0.0 {
                return Err(Error::config("client.mu", "must be non-negative"));
            }
        }
        if let Some(lr) = self.server.learning_rate {
            if lr.is_nan() || lr <= 0.0 {
                return Err(Error::config("server.learning_rate", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn weighting(&self) -> Weighting {
        self.server.weighting.unwrap_or_default()
    }
}

fn read_yaml(path: &Path) -> Result<serde_yaml::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::config(
            path.display().to_string(),
            format!("cannot read config file: {e}"),
        )
    })?;
    Ok(serde_yaml::from_str(&text)?)
}

/// Load and validate an experiment configuration file.
pub fn parse_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let value = read_yaml(path)?;
    let cfg: ExperimentConfig = serde_yaml::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load an algorithm configuration file as raw YAML; the registry merges
/// plugin fragments before the typed parse.
pub fn read_algorithm_value(path: &Path) -> Result<serde_yaml::Value> {
    read_yaml(path)
}

/// Typed parse of an algorithm document.
pub fn algorithm_config_from_value(value: serde_yaml::Value) -> Result<AlgorithmConfig> {
    let cfg: AlgorithmConfig = serde_yaml::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load and validate an algorithm configuration file (no plugins).
pub fn parse_algorithm_config(path: &Path) -> Result<AlgorithmConfig> {
    algorithm_config_from_value(read_algorithm_value(path)?)
}
