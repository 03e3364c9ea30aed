//! Run configuration file. Every key is optional; command-line flags take
//! precedence over the file.

use std::path::{Path, PathBuf};

use netml_core::features::SCHEMA_VERSION;
use netml_core::flow::FlowConfig;
use netml_core::mthl::MthlConfig;
use netml_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_ENV: &str = "NETML_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Record schema the run expects; must match the build's.
    pub schema_version: Option<u32>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub paths: Paths,
    pub flow: FlowSettings,
    pub prepare: PrepareSettings,
    pub train: TrainSettings,
    pub mthl: Option<MthlConfig>,
    pub mlp: MlpSettings,
    pub knn: KnnSettings,
    /// Datasets the evaluation report should cover.
    pub datasets: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub captures: Vec<PathBuf>,
    pub records: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub idle_timeout_seconds: Option<f64>,
    pub max_flows: Option<usize>,
    pub per_direction_packet_cap: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSettings {
    pub salt: Option<String>,
    pub ratio: Option<[u32; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    pub validation_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSettings {
    pub hidden: Option<Vec<usize>>,
    pub level: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnSettings {
    pub k: Option<usize>,
    pub level: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(v) = self.schema_version {
            if v != SCHEMA_VERSION {
                return Err(CliError::Usage(format!("config asks for schema version {v}, this build writes {SCHEMA_VERSION}")));
            }
        }
        if self.threads == Some(0) {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn flow_config(&self) -> FlowConfig {
        let d = FlowConfig::default();
        FlowConfig {
            idle_timeout_seconds: self.flow.idle_timeout_seconds.unwrap_or(d.idle_timeout_seconds),
            max_flows: self.flow.max_flows.unwrap_or(d.max_flows),
            per_direction_packet_cap: self.flow.per_direction_packet_cap.unwrap_or(d.per_direction_packet_cap),
        }
    }

    /// Seed is mandatory for commands that shuffle.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            epochs: t.epochs.unwrap_or(d.epochs),
            lr: t.lr.unwrap_or(d.lr),
            beta1: t.beta1.unwrap_or(d.beta1),
            beta2: t.beta2.unwrap_or(d.beta2),
            adam_epsilon: t.adam_epsilon.unwrap_or(d.adam_epsilon),
            seed,
            validation_fraction: t.validation_fraction.unwrap_or(d.validation_fraction),
        }
    }
}

/// Fails with a usage error when an input path does not exist.
pub fn require_exists(p: &Path) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", p.display())))
    }
}
