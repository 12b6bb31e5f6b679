//! ADWIN: adaptive windowing over a stream mean.
//!
//! Keeps the full observation window in memory and, on every update,
//! scans all split points oldest-first. A split whose sub-window means
//! differ by at least the Hoeffding-style cut threshold drops the older
//! sub-window. This is the plain quadratic variant, not the bucketed
//! approximation: exact and fast enough for monthly batch streams.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{DetectorError, DriftDetector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdwinParams {
    /// Confidence parameter; smaller values make cuts harder.
    pub delta: f64,
}

impl Default for AdwinParams {
    fn default() -> Self {
        AdwinParams { delta: 0.002 }
    }
}

pub struct Adwin {
    params: AdwinParams,
    window: VecDeque<f64>,
    sum: f64,
}

impl Adwin {
    pub fn new(params: AdwinParams) -> Result<Self, DetectorError> {
        if !(params.delta > 0.0 && params.delta < 1.0) {
            return Err(DetectorError::BadParam(format!(
                "adwin delta must lie in (0, 1), got {}",
                params.delta
            )));
        }
        Ok(Adwin {
            params,
            window: VecDeque::new(),
            sum: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Mean of the current window (0 when empty).
    pub fn mean(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.sum / self.window.len() as f64
        }
    }

    /// Cut threshold for sub-windows of size `n0` and `n1` out of `n`:
    /// `sqrt(ln(4n / delta) / (2m))` with `1/m = 1/n0 + 1/n1`.
    fn eps_cut(&self, n: f64, n0: f64, n1: f64) -> f64 {
        let m = 1.0 / (1.0 / n0 + 1.0 / n1);
        ((4.0 * n / self.params.delta).ln() / (2.0 * m)).sqrt()
    }

    /// Oldest-first scan; returns the first split index whose means
    /// violate the cut threshold.
    fn find_cut(&self) -> Option<usize> {
        let n = self.window.len();
        if n < 2 {
            return None;
        }
        let nf = n as f64;
        let mut left_sum = 0.0;
        for i in 1..n {
            left_sum += self.window[i - 1];
            let n0 = i as f64;
            let n1 = nf - n0;
            let mu0 = left_sum / n0;
            let mu1 = (self.sum - left_sum) / n1;
            if (mu0 - mu1).abs() >= self.eps_cut(nf, n0, n1) {
                return Some(i);
            }
        }
        None
    }
}

impl DriftDetector for Adwin {
    fn update(&mut self, value: f64) -> bool {
        self.window.push_back(value);
        self.sum += value;
        let mut drift = false;
        while let Some(cut) = self.find_cut() {
            self.window.drain(..cut);
            // Resum to keep the running total exact across shrinks.
            self.sum = self.window.iter().sum();
            drift = true;
        }
        drift
    }

    fn reset(&mut self) {
        self.window.clear();
        self.sum = 0.0;
    }

    fn name(&self) -> &'static str {
        "adwin"
    }
}
