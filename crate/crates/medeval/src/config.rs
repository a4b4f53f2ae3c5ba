//! Run configuration: a fully validated TOML file drives the pipeline;
//! CLI flags override individual keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusFormat, FilterPolicy};
use crate::judge::JudgeEndpointConfig;
use crate::metrics::MetricConfigs;
use crate::stats::Alternative;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config {path}: {detail}")]
    Invalid { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub references: PathBuf,
    #[serde(default = "default_format")]
    pub references_format: CorpusFormat,
    pub candidates_baseline: PathBuf,
    pub candidates_treatment: PathBuf,
    pub out_dir: PathBuf,
}

fn default_format() -> CorpusFormat {
    CorpusFormat::JsonArray
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelsConfig {
    pub baseline: String,
    pub treatment: String,
}

impl Default for LabelsConfig {
    fn default() -> Self {
        LabelsConfig {
            baseline: "baseline".to_string(),
            treatment: "finetuned".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Track B subset size.
    pub size: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { size: 20, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub alternative: Alternative,
    pub exact_threshold: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            alternative: Alternative::TwoSided,
            exact_threshold: crate::stats::DEFAULT_EXACT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Names this run's output subdirectory; reruns never overwrite it.
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub paths: PathsConfig,
    #[serde(default)]
    pub labels: LabelsConfig,
    #[serde(default)]
    pub metrics: MetricConfigs,
    #[serde(default)]
    pub filter: FilterPolicy,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub judge: JudgeEndpointConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    /// Free-form training-run metadata recorded in report provenance,
    /// never acted on (learning rate, epochs, sequence cutoff, ...).
    #[serde(default)]
    pub training_meta: std::collections::BTreeMap<String, String>,
}

fn default_run_id() -> String {
    "run-001".to_string()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let path_str = path.display().to_string();
        let content = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path_str.clone(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&content).map_err(|e| ConfigError::Invalid {
            path: path_str.clone(),
            detail: e.to_string(),
        })?;
        config.validate().map_err(|detail| ConfigError::Invalid {
            path: path_str,
            detail,
        })?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.run_id.is_empty() {
            return Err("run_id must be non-empty".into());
        }
        if self.labels.baseline == self.labels.treatment {
            return Err("baseline and treatment labels must differ".into());
        }
        self.metrics.bleu.validate()?;
        if self.metrics.rouge_l.beta <= 0.0 {
            return Err("rouge_l beta must be positive".into());
        }
        self.filter
            .validate()
            .map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.out_dir.join(&self.run_id)
    }
}
