//! Experiment orchestration: configuration, the run protocol
//! (folds x repeats), method-variant dispatch, and persistence.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohortweights::HospitalWeightConfig;
use crate::datagen::SyntheticOptions;
use crate::error::{Error, Result};
use crate::evaluation::PluginLearnerConfig;
use crate::federation::FederationConfig;
use crate::propensity::PropensityConfig;

mod persist;
mod pipeline;

pub use persist::{diagnose, fnv1a64, read_manifest, report, RunManifest};
pub use pipeline::{
    generate_datasets, run_experiment, AggregateReport, MetricStat, RepeatReport, RunSummary,
    TaskReport,
};

/// Stream tags for protocol-level randomness.
pub const STREAM_FOLD_SEED: u64 = 0x61;
pub const STREAM_TASK: u64 = 0x62;
pub const STREAM_REPLICATION: u64 = 0x63;

/// The method variants. The two-level method learns both weight levels; the
/// ablations switch one or both off; the centralized baselines pool all data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Personalized propensity (strategy scalar on), patient weights in the
    /// local loss, hospital weights at aggregation.
    #[serde(rename = "fed-iptw")]
    FedIptw,
    /// Both weight levels, but the propensity model never sees the hospital
    /// variable.
    #[serde(rename = "fed-iptw-noh")]
    FedIptwNoH,
    /// Propensity trained per client alone; patient weights only.
    #[serde(rename = "iptw-l")]
    IptwL,
    /// Propensity trained with plain FedAvg; pooled-marginal weights only.
    #[serde(rename = "iptw-g")]
    IptwG,
    /// No weighting anywhere (the plain FedAvg baseline).
    #[serde(rename = "fedavg-plain")]
    FedavgPlain,
    /// Centralized pooled training with the hospital variable.
    #[serde(rename = "global")]
    Global,
    /// Centralized pooled training without the hospital variable.
    #[serde(rename = "global-noh")]
    GlobalNoH,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FedIptw,
        Method::FedIptwNoH,
        Method::IptwL,
        Method::IptwG,
        Method::FedavgPlain,
        Method::Global,
        Method::GlobalNoH,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::FedIptw => "fed-iptw",
            Method::FedIptwNoH => "fed-iptw-noh",
            Method::IptwL => "iptw-l",
            Method::IptwG => "iptw-g",
            Method::FedavgPlain => "fedavg-plain",
            Method::Global => "global",
            Method::GlobalNoH => "global-noh",
        }
    }

    /// Whether the propensity model learns the strategy scalar.
    pub fn uses_h(&self) -> bool {
        matches!(self, Method::FedIptw | Method::Global)
    }

    /// Whether aggregation applies hospital weights.
    pub fn uses_hospital_weights(&self) -> bool {
        matches!(self, Method::FedIptw | Method::FedIptwNoH)
    }

    pub fn is_centralized(&self) -> bool {
        matches!(self, Method::Global | Method::GlobalNoH)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?}; expected one of {}",
                    Method::ALL.map(|m| m.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// CSV file path for `kind = "csv"`.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticOptions,
    /// How many replication files `generate` writes.
    pub n_replications: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            path: None,
            synthetic: SyntheticOptions::default(),
            n_replications: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub n_folds: usize,
    pub n_repeats: usize,
    /// Fold rotations evaluated per repeat; `0` means all of them.
    pub rotations_per_repeat: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_folds: 10,
            n_repeats: 20,
            rotations_per_repeat: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn rotations(&self) -> usize {
        if self.rotations_per_repeat == 0 || self.rotations_per_repeat > self.n_folds {
            self.n_folds
        } else {
            self.rotations_per_repeat
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IfPeheSettings {
    pub enabled: bool,
    pub learner: PluginLearnerConfig,
    /// Externally computed plug-in predictions
    /// (`client_id,row,mu0,mu1,pi`, rows indexing the client's original
    /// record order). When set, the internal plug-in learners are skipped.
    pub plugin_csv: Option<PathBuf>,
}

impl Default for IfPeheSettings {
    fn default() -> Self {
        IfPeheSettings {
            enabled: true,
            learner: PluginLearnerConfig::default(),
            plugin_csv: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FactualSettings {
    pub hidden: usize,
    /// Stage-2 learning rate; falls back to the federation learning rate.
    /// The outcome regression usually wants a smaller step than the
    /// propensity classifier.
    pub learning_rate: Option<f64>,
    /// Stage-2 batch size; falls back to the federation batch size.
    pub batch_size: Option<usize>,
    /// Stage-2 communication rounds; falls back to the federation rounds.
    pub rounds: Option<usize>,
}

impl Default for FactualSettings {
    fn default() -> Self {
        FactualSettings {
            hidden: 128,
            learning_rate: None,
            batch_size: None,
            rounds: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PersistConfig {
    pub models: bool,
    pub weights: bool,
    pub predictions: bool,
    pub round_logs: bool,
}

impl Default for PersistConfig {
    fn default() -> Self {
        PersistConfig {
            models: true,
            weights: true,
            predictions: true,
            round_logs: true,
        }
    }
}

/// Everything a reproducible run needs. The file form is TOML; the resolved
/// configuration is echoed into the run manifest, so there are no hidden
/// defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    pub dataset: DatasetConfig,
    pub federation: FederationConfig,
    pub propensity: PropensityConfig,
    pub factual: FactualSettings,
    pub hospital: HospitalWeightConfig,
    pub protocol: ProtocolConfig,
    pub if_pehe: IfPeheSettings,
    pub persist: PersistConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            method: Method::FedIptw,
            out_dir: PathBuf::from("runs/out"),
            jobs: 0,
            dataset: DatasetConfig::default(),
            federation: FederationConfig::default(),
            propensity: PropensityConfig::default(),
            factual: FactualSettings::default(),
            hospital: HospitalWeightConfig::default(),
            protocol: ProtocolConfig::default(),
            if_pehe: IfPeheSettings::default(),
            persist: PersistConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode error: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.propensity.validate()?;
        if self.protocol.n_folds < 3 {
            return Err(Error::Config("protocol.n_folds must be >= 3".into()));
        }
        if self.protocol.n_repeats == 0 {
            return Err(Error::Config("protocol.n_repeats must be >= 1".into()));
        }
        if self.factual.hidden == 0 {
            return Err(Error::Config("factual.hidden must be >= 1".into()));
        }
        if self.dataset.kind == DatasetKind::Csv && self.dataset.path.is_none() {
            return Err(Error::Config("dataset.path required for kind = \"csv\"".into()));
        }
        Ok(())
    }

    /// The propensity settings with the strategy scalar switched per method.
    pub fn propensity_for_method(&self) -> PropensityConfig {
        PropensityConfig {
            use_h: self.method.uses_h(),
            ..self.propensity.clone()
        }
    }
}
