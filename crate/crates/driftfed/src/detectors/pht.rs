//! Two-sided Page-Hinkley test.
//!
//! Tracks the running mean of the stream and two cumulative deviation
//! sums, one sensitive to upward shifts and one to downward shifts. Each
//! sum carries its own running minimum; a drift fires when either sum
//! rises more than `lambda` above its minimum. Detection resets the test
//! completely.

use serde::{Deserialize, Serialize};

use super::{DetectorError, DriftDetector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PageHinkleyParams {
    /// Tolerance subtracted from every deviation; absorbs drift-free noise.
    pub delta: f64,
    /// Detection threshold on the excursion above the running minimum.
    pub lambda: f64,
}

impl Default for PageHinkleyParams {
    fn default() -> Self {
        PageHinkleyParams {
            delta: 0.005,
            lambda: 50.0,
        }
    }
}

pub struct PageHinkley {
    params: PageHinkleyParams,
    n: u64,
    mean: f64,
    up_sum: f64,
    up_min: f64,
    down_sum: f64,
    down_min: f64,
}

impl PageHinkley {
    pub fn new(params: PageHinkleyParams) -> Result<Self, DetectorError> {
        if !(params.delta >= 0.0) {
            return Err(DetectorError::BadParam(format!(
                "page-hinkley delta must be nonnegative, got {}",
                params.delta
            )));
        }
        if !(params.lambda > 0.0) {
            return Err(DetectorError::BadParam(format!(
                "page-hinkley lambda must be positive, got {}",
                params.lambda
            )));
        }
        let mut det = PageHinkley {
            params,
            n: 0,
            mean: 0.0,
            up_sum: 0.0,
            up_min: 0.0,
            down_sum: 0.0,
            down_min: 0.0,
        };
        det.reset();
        Ok(det)
    }

    /// Current excursions above the running minima (both nonnegative).
    pub fn excursions(&self) -> (f64, f64) {
        (self.up_sum - self.up_min, self.down_sum - self.down_min)
    }
}

impl DriftDetector for PageHinkley {
    fn update(&mut self, value: f64) -> bool {
        self.n += 1;
        self.mean += (value - self.mean) / self.n as f64;
        self.up_sum += value - self.mean - self.params.delta;
        self.up_min = self.up_min.min(self.up_sum);
        self.down_sum += self.mean - value - self.params.delta;
        self.down_min = self.down_min.min(self.down_sum);
        let (up, down) = self.excursions();
        if up > self.params.lambda || down > self.params.lambda {
            self.reset();
            return true;
        }
        false
    }

    fn reset(&mut self) {
        self.n = 0;
        self.mean = 0.0;
        self.up_sum = 0.0;
        self.up_min = 0.0;
        self.down_sum = 0.0;
        self.down_min = 0.0;
    }

    fn name(&self) -> &'static str {
        "page_hinkley"
    }
}
