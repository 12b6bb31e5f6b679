//! Experiment configuration: a single versioned JSON document describing
//! the drift schedule, deployment topology, model, method parameters,
//! and the strategies to simulate.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{DetectorConfig, DetectorError};
use crate::flame::{FlameError, MonitorParams, StabilityParams};
use crate::model::{Arch, ModelError, TrainHyper};
use crate::stream::{build_schedule, ConceptSchedule, ScheduleSpec, StreamError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.to_string(),
    }
}

/// Size of the three-tier deployment. Endpoints are assigned to clients
/// round-robin, so `n_endpoints >= n_clients` guarantees every client
/// has at least one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub n_clients: usize,
    pub n_endpoints: usize,
}

/// Mitigation strategy selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    /// Never adapt; the initially deployed model serves forever.
    None,
    /// Retrain and redeploy every `k` months regardless of performance.
    Periodic { k: u32 },
    /// Per-endpoint streaming detector over raw confidence values.
    Detector { detector: DetectorConfig },
    /// KS monitor with the fixed threshold phi.
    FlameStatic,
    /// KS monitor with the adaptive threshold and gradient stability.
    FlameAdaptive,
}

impl StrategyKind {
    /// Stable name used for report directories and table rows.
    pub fn name(&self) -> String {
        match self {
            StrategyKind::None => "none".into(),
            StrategyKind::Periodic { k } => format!("periodic_{k}"),
            StrategyKind::Detector { detector } => detector.name().into(),
            StrategyKind::FlameStatic => "flame_static".into(),
            StrategyKind::FlameAdaptive => "flame_adaptive".into(),
        }
    }
}

/// Monitor and stability parameters shared by every strategy that needs
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlameConfig {
    pub monitor: MonitorParams,
    pub stability: StabilityParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Months reserved for initial training; inference covers the rest.
    pub train_months: u32,
    pub schedule: ScheduleSpec,
    pub topology: TopologyConfig,
    #[serde(default = "default_arch")]
    pub arch: Arch,
    #[serde(default)]
    pub hyper: TrainHyper,
    /// Apply inverse-sqrt class weights to the training loss.
    #[serde(default = "default_true")]
    pub weighted_loss: bool,
    #[serde(default = "default_client_samples")]
    pub client_samples_per_month: usize,
    #[serde(default = "default_endpoint_samples")]
    pub endpoint_samples_per_month: usize,
    #[serde(default)]
    pub flame: FlameConfig,
    pub strategies: Vec<StrategyKind>,
}

fn default_arch() -> Arch {
    Arch::Logistic
}

fn default_true() -> bool {
    true
}

fn default_client_samples() -> usize {
    400
}

fn default_endpoint_samples() -> usize {
    300
}

impl ExperimentConfig {
    /// Total simulated months (training + inference).
    pub fn months(&self) -> u32 {
        self.schedule.months
    }

    /// Months in which endpoints infer and monitor.
    pub fn inference_months(&self) -> std::ops::Range<u32> {
        self.train_months..self.months()
    }

    /// Full structural validation; returns the built schedule since
    /// validating requires building it anyway.
    pub fn validate(&self) -> Result<ConceptSchedule, ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        let schedule = build_schedule(&self.schedule).map_err(schedule_err)?;
        if self.train_months == 0 {
            return Err(invalid("train_months", "must be at least 1"));
        }
        if self.train_months >= schedule.months {
            return Err(invalid(
                "train_months",
                format!(
                    "must leave at least one inference month (schedule has {})",
                    schedule.months
                ),
            ));
        }
        if self.topology.n_clients == 0 {
            return Err(invalid("topology.n_clients", "must be at least 1"));
        }
        if self.topology.n_endpoints < self.topology.n_clients {
            return Err(invalid(
                "topology.n_endpoints",
                "must be at least n_clients so every client keeps an endpoint",
            ));
        }
        self.hyper.validate().map_err(hyper_err)?;
        if self.hyper.learning_rate == 0.0 {
            return Err(invalid("hyper.learning_rate", "must be positive"));
        }
        if self.client_samples_per_month == 0 {
            return Err(invalid("client_samples_per_month", "must be positive"));
        }
        if self.endpoint_samples_per_month == 0 {
            return Err(invalid("endpoint_samples_per_month", "must be positive"));
        }
        self.flame.monitor.validate().map_err(flame_err)?;
        self.flame.stability.validate().map_err(flame_err)?;
        if self.strategies.is_empty() {
            return Err(invalid("strategies", "at least one strategy is required"));
        }
        let mut names: Vec<String> = self.strategies.iter().map(StrategyKind::name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.strategies.len() {
            return Err(invalid(
                "strategies",
                "strategy names must be unique (duplicate kinds collide on output paths)",
            ));
        }
        for s in &self.strategies {
            match s {
                StrategyKind::Periodic { k } if *k == 0 => {
                    return Err(invalid("strategies", "periodic k must be at least 1"));
                }
                StrategyKind::Detector { detector } => {
                    detector.build(0).map_err(detector_err)?;
                }
                _ => {}
            }
        }
        Ok(schedule)
    }

    /// Read, parse, and validate a config file.
    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn schedule_err(e: StreamError) -> ConfigError {
    invalid("schedule", e)
}

fn hyper_err(e: ModelError) -> ConfigError {
    invalid("hyper", e)
}

fn flame_err(e: FlameError) -> ConfigError {
    invalid("flame", e)
}

fn detector_err(e: DetectorError) -> ConfigError {
    invalid("strategies", e)
}
