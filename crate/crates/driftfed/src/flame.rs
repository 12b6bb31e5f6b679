//! Drift monitoring and mitigation machinery: adaptive-threshold KS
//! monitoring on endpoints, stability scheduling for client training,
//! and concept-aware retention sampling for retraining sets.
//!
//! The monitor compares a reference confidence sample (the client's
//! validation confidences under the deployed model) against each month's
//! live confidences with a KS test. The static variant uses a fixed
//! cutoff phi; the adaptive variant recomputes the cutoff as
//! `3 * sigma + mean` over the KS statistics recorded since the last
//! drift, discarding the oldest third of that window first so stale
//! statistics stop influencing the threshold.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::ks_two_sample;
use crate::model::LossTrace;
use crate::seed;
use crate::stream::LabeledBatch;

#[derive(Debug, Error)]
pub enum FlameError {
    #[error("adaptive threshold needs a nonempty window")]
    EmptyWindow,
    #[error("monitor update needs nonempty live confidences")]
    EmptyLive,
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("concept store is empty")]
    EmptyStore,
    #[error("concept {index} holds no samples")]
    EmptyConcept { index: usize },
    #[error("newest concept has only {newest_size} samples; retention share would be empty")]
    InsufficientData { newest_size: usize },
    #[error("concepts disagree on feature dimension")]
    DimMismatch,
}

// =======================================================================
// Adaptive threshold and window pruning
// =======================================================================

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population (divide-by-n) standard deviation.
fn population_std(xs: &[f64]) -> f64 {
    let mu = mean(xs);
    (xs.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Drift cutoff over a window of KS statistics:
/// `phi_a = 3 * sigma + mu`, with sigma the population standard
/// deviation. Always at least the window mean.
pub fn adaptive_threshold(ks_window: &[f64]) -> Result<f64, FlameError> {
    if ks_window.is_empty() {
        return Err(FlameError::EmptyWindow);
    }
    Ok(3.0 * population_std(ks_window) + mean(ks_window))
}

/// Discard the oldest `floor(n/3)` entries once the window holds at
/// least 6; smaller windows pass through unchanged (below 6 the discard
/// would fight the warm-up guard). Surviving entries keep their order.
pub fn prune_window(ks_window: &mut Vec<f64>) {
    let n = ks_window.len();
    if n >= 6 {
        ks_window.drain(..n / 3);
    }
}

// =======================================================================
// Endpoint monitor
// =======================================================================

/// Threshold discipline of a monitor: a fixed cutoff, or the
/// recalculated `3 sigma + mu` window cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Static,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorParams {
    /// Fixed threshold phi; also the warm-up threshold in adaptive mode.
    pub static_phi: f64,
    /// KS statistics required before the adaptive threshold activates.
    pub min_window: usize,
}

impl Default for MonitorParams {
    fn default() -> Self {
        MonitorParams {
            static_phi: 0.8,
            min_window: 5,
        }
    }
}

impl MonitorParams {
    pub fn validate(&self) -> Result<(), FlameError> {
        if !(self.static_phi > 0.0 && self.static_phi <= 1.0) {
            return Err(FlameError::BadParam(format!(
                "static_phi must lie in (0, 1], got {}",
                self.static_phi
            )));
        }
        if self.min_window == 0 {
            return Err(FlameError::BadParam("min_window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorDecision {
    NoDrift,
    Drift,
}

/// Per-endpoint drift monitor over monthly confidence batches.
#[derive(Debug, Clone)]
pub struct MonitorState {
    params: MonitorParams,
    mode: ThresholdMode,
    reference: Vec<f64>,
    ks_window: Vec<f64>,
}

impl MonitorState {
    pub fn new(
        reference: Vec<f64>,
        params: MonitorParams,
        mode: ThresholdMode,
    ) -> Result<Self, FlameError> {
        params.validate()?;
        if reference.is_empty() {
            return Err(FlameError::BadParam(
                "reference confidence sample is empty".into(),
            ));
        }
        Ok(MonitorState {
            params,
            mode,
            reference,
            ks_window: Vec::new(),
        })
    }

    /// One month's decision. Computes `k = KS(reference, live)`; picks the
    /// threshold (static phi while in static mode or during warm-up,
    /// otherwise the adaptive cutoff over the pruned window); records `k`.
    /// A drift decision empties the window so earlier concepts stop
    /// influencing the threshold.
    pub fn update(&mut self, live_confidences: &[f64]) -> Result<MonitorDecision, FlameError> {
        if live_confidences.is_empty() {
            return Err(FlameError::EmptyLive);
        }
        let k = ks_two_sample(&self.reference, live_confidences);
        let threshold = match self.mode {
            ThresholdMode::Static => self.params.static_phi,
            ThresholdMode::Adaptive => {
                if self.ks_window.len() < self.params.min_window {
                    self.params.static_phi
                } else {
                    prune_window(&mut self.ks_window);
                    adaptive_threshold(&self.ks_window).expect("pruned window stays nonempty")
                }
            }
        };
        let drift = k > threshold;
        self.ks_window.push(k);
        if drift {
            self.ks_window.clear();
            Ok(MonitorDecision::Drift)
        } else {
            Ok(MonitorDecision::NoDrift)
        }
    }

    /// Swap in a freshly deployed model's reference sample and forget the
    /// old model's KS history.
    pub fn rebase(&mut self, reference: Vec<f64>) -> Result<(), FlameError> {
        if reference.is_empty() {
            return Err(FlameError::BadParam(
                "reference confidence sample is empty".into(),
            ));
        }
        self.reference = reference;
        self.ks_window.clear();
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.ks_window.len()
    }

    pub fn mode(&self) -> ThresholdMode {
        self.mode
    }
}

// =======================================================================
// Stability checks
// =======================================================================

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityParams {
    /// Required relative drop for the static rule `sigma_w < sigma_s * (1 - beta)`.
    pub beta: f64,
    /// Epochs per standard-deviation window.
    pub window_len: usize,
    /// Number of recent sigma_w points the slope is fitted over.
    pub grad_window: usize,
    /// Slope bound g: stable once the fitted slope is >= -g.
    pub grad_threshold: f64,
}

impl Default for StabilityParams {
    fn default() -> Self {
        StabilityParams {
            beta: 0.2,
            window_len: 5,
            grad_window: 5,
            grad_threshold: 1e-3,
        }
    }
}

impl StabilityParams {
    pub fn validate(&self) -> Result<(), FlameError> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(FlameError::BadParam(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        if self.window_len < 2 {
            return Err(FlameError::BadParam("window_len must be at least 2".into()));
        }
        if self.grad_window < 2 {
            return Err(FlameError::BadParam("grad_window must be at least 2".into()));
        }
        if !(self.grad_threshold >= 0.0) {
            return Err(FlameError::BadParam(
                "grad_threshold must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Which stability rule gates deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityVariant {
    Static,
    Gradient,
}

/// Tracks the stability curve of one training run: the standard
/// deviation sigma_w of the generalization gap over the trailing epoch
/// window, recorded once per epoch.
#[derive(Debug, Clone)]
pub struct StabilityState {
    pub params: StabilityParams,
    pub sigma_history: Vec<f64>,
    /// Last stable sigma; populated by the first observation so the
    /// static rule has a baseline to compare against.
    pub sigma_stable: Option<f64>,
}

impl StabilityState {
    pub fn new(params: StabilityParams) -> Result<Self, FlameError> {
        params.validate()?;
        Ok(StabilityState {
            params,
            sigma_history: Vec::new(),
            sigma_stable: None,
        })
    }

    /// Record sigma_w (population std of `val_loss - train_loss` over the
    /// last `window_len` epochs) from the trace. Returns `None` while the
    /// trace is shorter than one window.
    pub fn record_sigma(&mut self, trace: &LossTrace) -> Option<f64> {
        if trace.len() < self.params.window_len {
            return None;
        }
        let gaps = trace.gap();
        let tail = &gaps[gaps.len() - self.params.window_len..];
        let sigma = population_std(tail);
        self.sigma_history.push(sigma);
        Some(sigma)
    }
}

/// Static rule: stable when `sigma_w < sigma_s * (1 - beta)`. Records
/// sigma_w into the history; on a stable verdict, sigma_s is replaced by
/// sigma_w. Traces shorter than one window and the very first
/// observation (which seeds sigma_s) report not-stable.
pub fn stability_static(stab: &mut StabilityState, trace: &LossTrace) -> bool {
    let Some(sigma_w) = stab.record_sigma(trace) else {
        return false;
    };
    match stab.sigma_stable {
        None => {
            stab.sigma_stable = Some(sigma_w);
            false
        }
        Some(sigma_s) => {
            let stable = sigma_w < sigma_s * (1.0 - stab.params.beta);
            if stable {
                stab.sigma_stable = Some(sigma_w);
            }
            stable
        }
    }
}

/// Gradient rule: stable when the least-squares slope of the last
/// `grad_window` sigma_w values is at least `-grad_threshold`, i.e. the
/// stability curve has stopped descending. Insufficient history reports
/// not-stable. Callers populate the history via
/// [`StabilityState::record_sigma`].
pub fn stability_gradient(stab: &StabilityState) -> bool {
    let h = &stab.sigma_history;
    let k = stab.params.grad_window;
    if h.len() < k {
        return false;
    }
    ols_slope(&h[h.len() - k..]) >= -stab.params.grad_threshold
}

/// Ordinary least-squares slope of `ys` against indices `0..n`.
pub fn ols_slope(ys: &[f64]) -> f64 {
    assert!(ys.len() >= 2, "slope needs at least two points");
    let n = ys.len() as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = mean(ys);
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (y - y_mean);
        den += dx * dx;
    }
    num / den
}

// =======================================================================
// Concept retention
// =======================================================================

/// Ordered accumulation of every concept a client has seen, oldest
/// first. The newest concept is the one most recently appended.
#[derive(Debug, Clone, Default)]
pub struct ConceptStore {
    concepts: Vec<LabeledBatch>,
}

impl ConceptStore {
    pub fn new() -> Self {
        ConceptStore::default()
    }

    pub fn push_concept(&mut self, batch: LabeledBatch) {
        self.concepts.push(batch);
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[LabeledBatch] {
        &self.concepts
    }
}

/// Per-concept retention share sizes for concept sample sets listed
/// oldest to newest: the newest concept contributes `floor(s_n / 2)`
/// samples; the older concept at 1-based position x contributes
/// `floor(x * s_x / (2 * T))` with `T = 1 + 2 + ... + (n-1)`, a linearly
/// decaying share with age.
pub fn retention_sizes(sample_sizes: &[usize]) -> Result<Vec<usize>, FlameError> {
    let n = sample_sizes.len();
    if n == 0 {
        return Err(FlameError::EmptyStore);
    }
    let newest = sample_sizes[n - 1] / 2;
    if newest == 0 {
        return Err(FlameError::InsufficientData {
            newest_size: sample_sizes[n - 1],
        });
    }
    let mut out = vec![0usize; n];
    out[n - 1] = newest;
    if n > 1 {
        let denom: usize = (n - 1) * n / 2;
        for x in 1..n {
            out[x - 1] = x * sample_sizes[x - 1] / (2 * denom);
        }
    }
    Ok(out)
}

/// Build the retraining set: half the newest concept plus linearly
/// decaying shares of the older ones, each share sampled uniformly
/// without replacement. Output rows are ordered oldest concept first and
/// keep their within-concept order; month and concept metadata mirror
/// the newest concept. Pure given the store snapshot and seed.
pub fn build_retention_dataset(
    store: &ConceptStore,
    retention_seed: u64,
) -> Result<LabeledBatch, FlameError> {
    let concepts = store.concepts();
    if concepts.is_empty() {
        return Err(FlameError::EmptyStore);
    }
    for (index, c) in concepts.iter().enumerate() {
        if c.is_empty() {
            return Err(FlameError::EmptyConcept { index });
        }
    }
    let dim = concepts[0].feature_dim;
    if concepts.iter().any(|c| c.feature_dim != dim) {
        return Err(FlameError::DimMismatch);
    }
    let sizes = retention_sizes(&concepts.iter().map(LabeledBatch::len).collect::<Vec<_>>())?;

    let mut rng = seed::stream_rng(retention_seed, "retention", &[]);
    let newest = concepts.last().expect("nonempty");
    let mut out = LabeledBatch {
        features: Vec::new(),
        feature_dim: dim,
        labels: Vec::new(),
        month: newest.month,
        true_concept: newest.true_concept.clone(),
    };
    for (concept, &k) in concepts.iter().zip(&sizes) {
        let mut picks = sample(&mut rng, concept.len(), k).into_vec();
        picks.sort_unstable();
        for &i in &picks {
            out.features.extend_from_slice(concept.row(i));
            out.labels.push(concept.labels[i]);
        }
    }
    Ok(out)
}
