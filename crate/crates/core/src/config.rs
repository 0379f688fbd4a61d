//! Experiment configuration.
//!
//! Configs are JSON documents. Unknown keys are rejected at every level.
//! A minimal config only needs `algorithm` and a (possibly empty) `data`
//! object:
//!
//! ```json
//! { "algorithm": "fedcca", "data": { "num_clients": 10 } }
//! ```
//!
//! Defaults: 100 rounds, 5 local epochs, batch size 32, learning rate 0.01,
//! median-heuristic sigma, `n_max` 10, full participation, FedProx `mu`
//! 0.01, logistic-regression models, Dirichlet(0.5) label skew over 10
//! clients, a single unrotated domain and a 20% test split.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PartitionPlan, PartitionScheme, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Activation, ModelSpec};
use crate::protocol::{AggregationWeighting, FedccaHyper, SelectionRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedcca,
    Fedavg,
    Fedprox,
    LocalOnly,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Fedcca,
        Algorithm::Fedavg,
        Algorithm::Fedprox,
        Algorithm::LocalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedcca => "fedcca",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedprox => "fedprox",
            Algorithm::LocalOnly => "local_only",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("algorithm", format!("unknown algorithm `{s}`")))
    }
}

/// Which FedCCA components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationVariant {
    pub selection_enabled: bool,
    pub attention_aggregation_enabled: bool,
}

impl AblationVariant {
    pub fn selection_rule(self) -> SelectionRule {
        if self.selection_enabled {
            SelectionRule::Threshold
        } else {
            SelectionRule::AdmitAll
        }
    }

    pub fn weighting(self) -> AggregationWeighting {
        if self.attention_aggregation_enabled {
            AggregationWeighting::Attention
        } else {
            AggregationWeighting::Uniform
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Admit every candidate (by ascending dissimilarity) up to `n_max`.
    NoSelection,
    /// Uniform weights over the selected sources and the client itself.
    NoAttentionAggregation,
    NoSelectionNoAttention,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoSelection,
        Ablation::NoAttentionAggregation,
        Ablation::NoSelectionNoAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSelection => "no_selection",
            Ablation::NoAttentionAggregation => "no_attention_aggregation",
            Ablation::NoSelectionNoAttention => "no_selection_no_attention",
        }
    }

    pub fn variant(self) -> AblationVariant {
        AblationVariant {
            selection_enabled: matches!(self, Ablation::Full | Ablation::NoAttentionAggregation),
            attention_aggregation_enabled: matches!(self, Ablation::Full | Ablation::NoSelection),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("ablation", format!("unknown ablation `{s}`")))
    }
}

/// Model architecture. Input and output sizes come from the data section.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "data_defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default = "data_defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "data_defaults::samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "data_defaults::cluster_separation")]
    pub cluster_separation: f64,
    #[serde(default = "data_defaults::noise_std")]
    pub noise_std: f64,
    #[serde(default = "data_defaults::num_clients")]
    pub num_clients: usize,
    #[serde(default = "data_defaults::scheme")]
    pub scheme: PartitionScheme,
    #[serde(default = "data_defaults::domain_angles")]
    pub domain_angles: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_domain_map: Option<Vec<usize>>,
    #[serde(default = "data_defaults::test_fraction")]
    pub test_fraction: f64,
}

mod data_defaults {
    use crate::data::{PartitionScheme, SyntheticSpec};

    pub fn num_classes() -> usize {
        SyntheticSpec::default().num_classes
    }
    pub fn feature_dim() -> usize {
        SyntheticSpec::default().feature_dim
    }
    pub fn samples_per_class() -> usize {
        SyntheticSpec::default().samples_per_class
    }
    pub fn cluster_separation() -> f64 {
        SyntheticSpec::default().cluster_separation
    }
    pub fn noise_std() -> f64 {
        SyntheticSpec::default().noise_std
    }
    pub fn num_clients() -> usize {
        10
    }
    pub fn scheme() -> PartitionScheme {
        PartitionScheme::Dirichlet { alpha: 0.5 }
    }
    pub fn domain_angles() -> Vec<f64> {
        vec![0.0]
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all data fields have defaults")
    }
}

impl DataConfig {
    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            samples_per_class: self.samples_per_class,
            cluster_separation: self.cluster_separation,
            noise_std: self.noise_std,
        }
    }

    pub fn plan(&self) -> PartitionPlan {
        PartitionPlan {
            scheme: self.scheme,
            num_clients: self.num_clients,
            domain_angles: self.domain_angles.clone(),
            client_domain_map: self.client_domain_map.clone(),
            test_fraction: self.test_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    /// Local model architecture.
    #[serde(default)]
    pub model: ArchitectureConfig,
    /// Client-specific model architecture; same as `model` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cs_model: Option<ArchitectureConfig>,
    pub data: DataConfig,
    #[serde(default)]
    pub hyper: FedccaHyper,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_rounds() -> usize {
    100
}

fn default_eval_every() -> usize {
    1
}

impl ExperimentConfig {
    pub fn new(algorithm: Algorithm, data: DataConfig) -> Self {
        ExperimentConfig {
            algorithm,
            model: ArchitectureConfig::default(),
            cs_model: None,
            data,
            hyper: FedccaHyper::default(),
            ablation: Ablation::Full,
            rounds: default_rounds(),
            seed: 0,
            eval_every: default_eval_every(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(json_error)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn spec_for(&self, arch: &ArchitectureConfig) -> ModelSpec {
        ModelSpec {
            input_dim: self.data.feature_dim,
            hidden_dims: arch.hidden_dims.clone(),
            num_classes: self.data.num_classes,
            activation: arch.activation,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.spec_for(&self.model)
    }

    pub fn cs_model_spec(&self) -> ModelSpec {
        self.spec_for(self.cs_model.as_ref().unwrap_or(&self.model))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        self.data.synthetic().validate()?;
        self.data.plan().validate(&self.data.synthetic())?;
        self.hyper.validate()?;
        if self.model.hidden_dims.contains(&0) {
            return Err(Error::config("model.hidden_dims", "widths must be positive"));
        }
        if let Some(cs) = &self.cs_model {
            if cs.hidden_dims.contains(&0) {
                return Err(Error::config("cs_model.hidden_dims", "widths must be positive"));
            }
        }
        if self.ablation != Ablation::Full && self.algorithm != Algorithm::Fedcca {
            return Err(Error::config(
                "ablation",
                format!(
                    "ablation `{}` only applies to fedcca, not {}",
                    self.ablation, self.algorithm
                ),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn json_error(e: serde_json::Error) -> Error {
    let msg = e.to_string();
    let key = msg
        .strip_prefix("unknown field `")
        .or_else(|| msg.strip_prefix("missing field `"))
        .and_then(|rest| rest.split('`').next())
        .map(str::to_string);
    match key {
        Some(key) => Error::config(key, msg),
        None => Error::Json(e),
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::ReadFile {
        path: path.display().to_string(),
        source,
    })?;
    ExperimentConfig::from_json(&text)
}
