//! Streaming drift detectors and the two-sample KS statistic.
//!
//! Detectors consume one scalar observation at a time (here: model
//! confidence values) and report whether that observation completed a
//! drift signal. All detectors are deterministic; the only randomized
//! one (KSWIN) draws from an explicitly seeded generator.

mod adwin;
mod kswin;
mod pht;

pub use adwin::{Adwin, AdwinParams};
pub use kswin::{Kswin, KswinParams};
pub use pht::{PageHinkley, PageHinkleyParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector parameter: {0}")]
    BadParam(String),
}

/// A streaming change detector over scalar observations.
pub trait DriftDetector {
    /// Feed one observation; returns true when this observation completes
    /// a drift signal.
    fn update(&mut self, value: f64) -> bool;

    /// Drop all learned state, as if freshly constructed.
    fn reset(&mut self);

    /// Short stable identifier used in reports.
    fn name(&self) -> &'static str;
}

/// Exact two-sample Kolmogorov-Smirnov statistic:
/// `sup_x |F_a(x) - F_b(x)|` over the empirical CDFs.
///
/// Computed by a sorted merge walk, so ties are handled exactly. Both
/// samples must be nonempty and free of NaN. The result lies in `[0, 1]`,
/// is symmetric in its arguments, and is invariant under any strictly
/// increasing transform applied to both samples.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "ks_two_sample needs nonempty samples");
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).expect("NaN in ks sample"));
    ys.sort_by(|p, q| p.partial_cmp(q).expect("NaN in ks sample"));
    let n = xs.len() as f64;
    let m = ys.len() as f64;
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Serializable detector selection, the shape used in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorConfig {
    Adwin(AdwinParams),
    PageHinkley(PageHinkleyParams),
    Kswin(KswinParams),
}

impl DetectorConfig {
    /// Instantiate the detector. `seed` feeds KSWIN's sampler; the other
    /// detectors are deterministic and ignore it.
    pub fn build(&self, seed: u64) -> Result<Box<dyn DriftDetector>, DetectorError> {
        Ok(match self {
            DetectorConfig::Adwin(p) => Box::new(Adwin::new(*p)?),
            DetectorConfig::PageHinkley(p) => Box::new(PageHinkley::new(*p)?),
            DetectorConfig::Kswin(p) => Box::new(Kswin::new(*p, seed)?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DetectorConfig::Adwin(_) => "adwin",
            DetectorConfig::PageHinkley(_) => "page_hinkley",
            DetectorConfig::Kswin(_) => "kswin",
        }
    }
}
