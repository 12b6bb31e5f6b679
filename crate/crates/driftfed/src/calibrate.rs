//! Detector calibration: grid-search each detector family for the most
//! sensitive setting that stays silent on drift-free data.
//!
//! The probe streams are the training months replayed through the
//! initially deployed global model, per endpoint, using exactly the
//! seeds the simulator would use. Those months precede any scheduled
//! drift, so every detection there is a false positive.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ExperimentConfig, StrategyKind};
use crate::detectors::{AdwinParams, DetectorConfig, KswinParams, PageHinkleyParams};
use crate::federation::{SimError, Simulation};
use crate::model::predict_batch;
use crate::seed;
use crate::stream::generate_month;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("calibration failed: every setting fired on drift-free data\n{details}")]
    NoQuietSetting { details: String },
}

/// One grid point and how often it fired across all probe streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub setting: DetectorConfig,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyCalibration {
    pub family: String,
    /// Most sensitive zero-detection setting.
    pub chosen: DetectorConfig,
    /// Full grid, most sensitive first.
    pub trials: Vec<Trial>,
}

/// Everything `calibration.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub seed: u64,
    pub n_streams: usize,
    pub stream_len: usize,
    pub families: Vec<FamilyCalibration>,
}

/// Grids ordered most sensitive first, so the first quiet setting is
/// the chosen one. ADWIN and KSWIN grow more sensitive with delta and
/// alpha; Page-Hinkley grows more sensitive as lambda shrinks.
fn grids() -> Vec<(&'static str, Vec<DetectorConfig>)> {
    let adwin = [0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001]
        .into_iter()
        .map(|delta| DetectorConfig::Adwin(AdwinParams { delta }))
        .collect();
    let pht = [10.0, 25.0, 50.0, 100.0, 200.0]
        .into_iter()
        .map(|lambda| {
            DetectorConfig::PageHinkley(PageHinkleyParams {
                lambda,
                ..PageHinkleyParams::default()
            })
        })
        .collect();
    let kswin = [0.05, 0.01, 0.005, 0.001, 0.0001]
        .into_iter()
        .map(|alpha| {
            DetectorConfig::Kswin(KswinParams {
                alpha,
                ..KswinParams::default()
            })
        })
        .collect();
    vec![("adwin", adwin), ("page_hinkley", pht), ("kswin", kswin)]
}

/// Per-endpoint confidence streams over the training months, produced
/// by the same initial training a real run would execute.
pub fn training_confidence_streams(
    config: &ExperimentConfig,
) -> Result<Vec<Vec<f64>>, SimError> {
    let schedule = config
        .validate()
        .map_err(|e| SimError::Invalid(e.to_string()))?;
    let mut sim = Simulation::new(config, &StrategyKind::None)?;
    sim.initial_training()?;
    let model = sim.global_model().clone();
    let mut streams = Vec::with_capacity(config.topology.n_endpoints);
    for e in 0..config.topology.n_endpoints {
        let mut confs = Vec::new();
        for m in 0..config.train_months {
            let batch = generate_month(
                &schedule,
                m,
                config.endpoint_samples_per_month,
                seed::derive(config.seed, "endpoint-data", &[e as u64]),
            )?;
            confs.extend(predict_batch(&model, &batch));
        }
        streams.push(confs);
    }
    Ok(streams)
}

fn count_detections(
    setting: &DetectorConfig,
    streams: &[Vec<f64>],
    root: u64,
) -> Result<usize, SimError> {
    let mut total = 0;
    for (e, stream) in streams.iter().enumerate() {
        // Same per-endpoint detector seed the simulator uses.
        let mut detector = setting.build(seed::derive(root, "detector", &[e as u64]))?;
        for &v in stream {
            if detector.update(v) {
                total += 1;
            }
        }
    }
    Ok(total)
}

/// Run the grid search. Fails (listing the least noisy candidates) when
/// a family has no quiet setting at all.
pub fn calibrate(config: &ExperimentConfig) -> Result<Calibration, CalibrateError> {
    let streams = training_confidence_streams(config)?;
    calibrate_streams(&streams, config.seed)
}

/// Grid-search over prepared probe streams. Split out of [`calibrate`]
/// so pathological streams can be calibrated directly.
pub fn calibrate_streams(
    streams: &[Vec<f64>],
    seed: u64,
) -> Result<Calibration, CalibrateError> {
    let stream_len = streams.first().map_or(0, |s| s.len());
    let mut families = Vec::new();
    let mut failures = Vec::new();
    for (family, grid) in grids() {
        let mut trials = Vec::with_capacity(grid.len());
        for setting in &grid {
            let detections = count_detections(setting, streams, seed)?;
            trials.push(Trial {
                setting: setting.clone(),
                detections,
            });
        }
        match trials.iter().find(|t| t.detections == 0) {
            Some(quiet) => families.push(FamilyCalibration {
                family: family.to_string(),
                chosen: quiet.setting.clone(),
                trials,
            }),
            None => {
                let best = trials
                    .iter()
                    .min_by_key(|t| t.detections)
                    .expect("grids are nonempty");
                failures.push(format!(
                    "{family}: best candidate {} still fired {} times",
                    serde_json::to_string(&best.setting).expect("settings serialize"),
                    best.detections
                ));
            }
        }
    }
    if !failures.is_empty() {
        return Err(CalibrateError::NoQuietSetting {
            details: failures.join("\n"),
        });
    }
    Ok(Calibration {
        seed,
        n_streams: streams.len(),
        stream_len,
        families,
    })
}
