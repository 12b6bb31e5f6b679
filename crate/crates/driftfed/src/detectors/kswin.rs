//! KSWIN: Kolmogorov-Smirnov windowing.
//!
//! Keeps a sliding window of the last `window` observations. Once the
//! window is full, every `stat_size` new observations the detector
//! compares the most recent `stat_size` values against `stat_size` values
//! sampled without replacement from the older remainder, so consecutive
//! tests never share a recent sub-window. A KS statistic above
//! `sqrt(-ln(alpha) / stat_size)` signals drift, and the window collapses
//! to the recent sub-window so detection restarts from the new regime.
//! Batching the test keeps the false-alarm budget near `alpha` per
//! `stat_size` observations instead of per observation.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ks_two_sample, DetectorError, DriftDetector};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KswinParams {
    /// Total sliding-window length.
    pub window: usize,
    /// Size of the recent sub-window and of the comparison sample.
    pub stat_size: usize,
    /// Significance level of the KS threshold.
    pub alpha: f64,
}

impl Default for KswinParams {
    fn default() -> Self {
        KswinParams {
            window: 100,
            stat_size: 30,
            alpha: 0.005,
        }
    }
}

pub struct Kswin {
    params: KswinParams,
    threshold: f64,
    window: VecDeque<f64>,
    rng: ChaCha8Rng,
    /// Observations seen since the last KS test while the window was full.
    /// Starts armed at `stat_size` so a freshly filled window tests at once.
    since_test: usize,
}

impl Kswin {
    /// `seed` drives the without-replacement sampling and is the only
    /// source of randomness.
    pub fn new(params: KswinParams, seed: u64) -> Result<Self, DetectorError> {
        if params.stat_size == 0 {
            return Err(DetectorError::BadParam(
                "kswin stat_size must be positive".into(),
            ));
        }
        if params.window < 2 * params.stat_size {
            return Err(DetectorError::BadParam(format!(
                "kswin window ({}) must be at least twice stat_size ({})",
                params.window, params.stat_size
            )));
        }
        if !(params.alpha > 0.0 && params.alpha < 1.0) {
            return Err(DetectorError::BadParam(format!(
                "kswin alpha must lie in (0, 1), got {}",
                params.alpha
            )));
        }
        Ok(Kswin {
            params,
            threshold: (-params.alpha.ln() / params.stat_size as f64).sqrt(),
            window: VecDeque::new(),
            rng: seed::stream_rng(seed, "kswin-sampler", &[]),
            since_test: params.stat_size,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }
}

impl DriftDetector for Kswin {
    fn update(&mut self, value: f64) -> bool {
        self.window.push_back(value);
        if self.window.len() > self.params.window {
            self.window.pop_front();
        }
        if self.window.len() < self.params.window {
            return false;
        }
        let r = self.params.stat_size;
        self.since_test += 1;
        if self.since_test < r {
            return false;
        }
        self.since_test = 0;
        let older_len = self.params.window - r;
        let buf = self.window.make_contiguous();
        let recent = &buf[older_len..];
        let older = &buf[..older_len];
        let picks = sample(&mut self.rng, older_len, r);
        let sampled: Vec<f64> = picks.iter().map(|i| older[i]).collect();
        if ks_two_sample(&sampled, recent) > self.threshold {
            // Restart from the new regime: keep only the recent sub-window
            // and rearm so the next refill is tested immediately.
            self.window.drain(..older_len);
            self.since_test = r;
            return true;
        }
        false
    }

    /// Clears the observation window. The sampling RNG keeps its position
    /// so repeated resets do not replay identical index draws.
    fn reset(&mut self) {
        self.window.clear();
        self.since_test = self.params.stat_size;
    }

    fn name(&self) -> &'static str {
        "kswin"
    }
}
