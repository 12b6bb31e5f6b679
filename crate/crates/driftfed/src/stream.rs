//! Synthetic labeled data streams with scheduled concept drift.
//!
//! A [`ConceptSchedule`] assigns one concept to every simulated month and
//! declares how each segment transitions from its predecessor (abrupt,
//! gradual, incremental or recurring). [`generate_month`] samples a labeled
//! batch from the concept active at a given month; the call is a pure
//! function of its arguments, so batches are bit-reproducible.
//!
//! Features are per-class isotropic Gaussians. Drift severity is the
//! distance between class means across concepts.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("schedule validation failed: {0}")]
    InvalidSchedule(String),
    #[error("invalid concept parameters: {0}")]
    InvalidConcept(String),
    #[error("month {month} outside schedule range [0, {months})")]
    MonthOutOfRange { month: u32, months: u32 },
    #[error("sample count must be positive")]
    EmptyCount,
    #[error("csv dump failed: {0}")]
    Io(#[from] std::io::Error),
}

/// How a segment's concept takes over from the previous segment's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    /// Full switch at the segment's first month.
    Abrupt,
    /// Samples mix old and new concepts with probability linear in the
    /// month's position within the segment.
    Gradual,
    /// Class means interpolate linearly from the old concept to the new
    /// across the segment.
    Incremental,
    /// A concept from an earlier segment reappears verbatim.
    Recurring,
}

/// Generative parameters of one data concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptParams {
    /// Feature mean of the benign (label 0) class.
    pub benign_mean: Vec<f64>,
    /// Feature mean of the malware (label 1) class.
    pub malware_mean: Vec<f64>,
    /// Isotropic standard deviation shared by both classes.
    pub covariance_scale: f64,
    /// Probability a sampled label is flipped (real-drift knob).
    pub label_flip_rate: f64,
    /// Prevalence of the minority (malware) class.
    pub malware_fraction: f64,
}

impl ConceptParams {
    pub fn validate(&self) -> Result<(), StreamError> {
        if self.benign_mean.len() != self.malware_mean.len() {
            return Err(StreamError::InvalidConcept(
                "class mean vectors have different lengths".into(),
            ));
        }
        if self.benign_mean == self.malware_mean {
            return Err(StreamError::InvalidConcept(
                "class means must be distinct".into(),
            ));
        }
        if !(self.covariance_scale > 0.0) {
            return Err(StreamError::InvalidConcept(
                "covariance_scale must be positive".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.label_flip_rate) {
            return Err(StreamError::InvalidConcept(
                "label_flip_rate must lie in [0, 0.5]".into(),
            ));
        }
        if !(self.malware_fraction > 0.0 && self.malware_fraction < 1.0) {
            return Err(StreamError::InvalidConcept(
                "malware_fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.benign_mean.len()
    }
}

/// One contiguous run of months governed by a single concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start_month: u32,
    pub end_month: u32,
    pub concept_id: String,
    pub transition: TransitionKind,
}

/// Ground-truth sequence of concepts over the simulated horizon.
///
/// Segments tile `[0, months)` with no gaps or overlaps; every referenced
/// concept exists in the concept map. Construct via [`build_schedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSchedule {
    pub months: u32,
    pub segments: Vec<Segment>,
    pub concepts: BTreeMap<String, ConceptParams>,
}

impl ConceptSchedule {
    /// Index of the segment containing `month`.
    pub fn segment_at(&self, month: u32) -> Result<usize, StreamError> {
        if month >= self.months {
            return Err(StreamError::MonthOutOfRange {
                month,
                months: self.months,
            });
        }
        self.segments
            .iter()
            .position(|s| s.start_month <= month && month < s.end_month)
            .ok_or_else(|| StreamError::InvalidSchedule("untiled month".into()))
    }

    /// Concept id active at `month`.
    pub fn concept_at(&self, month: u32) -> Result<&str, StreamError> {
        let ix = self.segment_at(month)?;
        Ok(&self.segments[ix].concept_id)
    }

    pub fn feature_dim(&self) -> usize {
        self.concepts
            .values()
            .next()
            .map(ConceptParams::feature_dim)
            .unwrap_or(0)
    }
}

/// A labeled batch of samples drawn for one month.
///
/// Features are stored row-major: sample `i` occupies
/// `features[i * feature_dim .. (i + 1) * feature_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub features: Vec<f64>,
    pub feature_dim: usize,
    /// 0 = benign, 1 = malware.
    pub labels: Vec<u8>,
    pub month: u32,
    pub true_concept: String,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Fraction of label-1 samples.
    pub fn positive_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().map(|&l| l as usize).sum::<usize>() as f64 / self.labels.len() as f64
    }

    /// Append another batch's samples; month/concept metadata keeps the
    /// newer batch's values.
    pub fn merge(&mut self, other: &LabeledBatch) {
        assert_eq!(self.feature_dim, other.feature_dim, "feature dim mismatch");
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        if other.month >= self.month {
            self.month = other.month;
            self.true_concept = other.true_concept.clone();
        }
    }

    /// Dump as CSV with header `month,concept,label,f0..f{d-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), StreamError> {
        let cols: Vec<String> = (0..self.feature_dim).map(|j| format!("f{j}")).collect();
        writeln!(w, "month,concept,label,{}", cols.join(","))?;
        for i in 0..self.len() {
            let feats: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            writeln!(
                w,
                "{},{},{},{}",
                self.month,
                self.true_concept,
                self.labels[i],
                feats.join(",")
            )?;
        }
        Ok(())
    }
}

/// Description from which a schedule is built (the config-file shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub months: u32,
    pub segments: Vec<Segment>,
    /// Explicit concept library; `None` selects [`default_concept_library`].
    #[serde(default)]
    pub concepts: Option<BTreeMap<String, ConceptParams>>,
    /// Feature dimension used when the default library is generated.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_feature_dim() -> usize {
    16
}

/// Default library of four well-separated concepts.
///
/// Concept `ck` places the benign mean at `+2` and the malware mean at `-2`
/// on its own quarter of the feature dimensions (zero elsewhere), with unit
/// covariance scale, 10% malware and no label noise. Pairwise mean distance
/// is `2 * 2 * sqrt(dim/2) / sqrt(dim/4)`... in short at least twice the
/// covariance scale, which makes pre/post-drift F1 gaps large by
/// construction.
pub fn default_concept_library(feature_dim: usize) -> BTreeMap<String, ConceptParams> {
    assert!(feature_dim >= 4, "default library needs feature_dim >= 4");
    let block = feature_dim / 4;
    let mut out = BTreeMap::new();
    for k in 0..4usize {
        let mut benign = vec![0.0; feature_dim];
        let mut malware = vec![0.0; feature_dim];
        let lo = k * block;
        let hi = (k + 1) * block;
        for d in lo..hi {
            benign[d] = 2.0;
            malware[d] = -2.0;
        }
        out.insert(
            format!("c{k}"),
            ConceptParams {
                benign_mean: benign,
                malware_mean: malware,
                covariance_scale: 1.0,
                label_flip_rate: 0.0,
                malware_fraction: 0.10,
            },
        );
    }
    out
}

/// Validate a schedule description and produce the canonical schedule.
///
/// Deterministic for identical specs. Fails when segments do not tile
/// `[0, months)`, reference unknown concepts, or declare transitions that
/// have nothing to transition from.
pub fn build_schedule(spec: &ScheduleSpec) -> Result<ConceptSchedule, StreamError> {
    if spec.months == 0 {
        return Err(StreamError::InvalidSchedule(
            "month count must be positive".into(),
        ));
    }
    if spec.segments.is_empty() {
        return Err(StreamError::InvalidSchedule("no segments declared".into()));
    }
    let concepts = match &spec.concepts {
        Some(map) if !map.is_empty() => map.clone(),
        _ => default_concept_library(spec.feature_dim),
    };
    for (id, params) in &concepts {
        params
            .validate()
            .map_err(|e| StreamError::InvalidConcept(format!("concept {id}: {e}")))?;
    }
    let dim = concepts.values().next().expect("nonempty").feature_dim();
    if concepts.values().any(|c| c.feature_dim() != dim) {
        return Err(StreamError::InvalidConcept(
            "all concepts must share one feature dimension".into(),
        ));
    }

    let mut segments = spec.segments.clone();
    segments.sort_by_key(|s| s.start_month);
    let mut cursor = 0u32;
    for seg in &segments {
        if seg.start_month >= seg.end_month {
            return Err(StreamError::InvalidSchedule(format!(
                "segment [{}, {}) is empty or inverted",
                seg.start_month, seg.end_month
            )));
        }
        if seg.start_month != cursor {
            return Err(StreamError::InvalidSchedule(format!(
                "segments overlap or leave a gap at month {cursor} (next segment starts at {})",
                seg.start_month
            )));
        }
        if !concepts.contains_key(&seg.concept_id) {
            return Err(StreamError::InvalidSchedule(format!(
                "segment references unknown concept {}",
                seg.concept_id
            )));
        }
        cursor = seg.end_month;
    }
    if cursor != spec.months {
        return Err(StreamError::InvalidSchedule(format!(
            "segments cover [0, {cursor}) but the schedule declares {} months",
            spec.months
        )));
    }
    for (i, seg) in segments.iter().enumerate() {
        match seg.transition {
            TransitionKind::Abrupt => {}
            TransitionKind::Gradual | TransitionKind::Incremental => {
                if i == 0 {
                    return Err(StreamError::InvalidSchedule(
                        "first segment has no previous concept to transition from".into(),
                    ));
                }
            }
            TransitionKind::Recurring => {
                let seen = segments[..i].iter().any(|p| p.concept_id == seg.concept_id);
                if !seen {
                    return Err(StreamError::InvalidSchedule(format!(
                        "recurring segment reuses concept {} that never appeared before",
                        seg.concept_id
                    )));
                }
            }
        }
    }

    Ok(ConceptSchedule {
        months: spec.months,
        segments,
        concepts,
    })
}

/// Draw one month's labeled batch.
///
/// Pure function of its arguments: identical `(schedule, month, count, seed)`
/// yield bit-identical batches. Gradual segments mix the previous and
/// current concept with new-concept probability `(m - start + 1) / len`, so
/// the mix completes at the segment's last month; incremental segments
/// interpolate class means (and the scalar knobs) with the same coefficient.
pub fn generate_month(
    schedule: &ConceptSchedule,
    month: u32,
    count: usize,
    seed: u64,
) -> Result<LabeledBatch, StreamError> {
    if count == 0 {
        return Err(StreamError::EmptyCount);
    }
    let seg_ix = schedule.segment_at(month)?;
    let seg = &schedule.segments[seg_ix];
    let current = &schedule.concepts[&seg.concept_id];
    let dim = current.feature_dim();

    let previous = if seg_ix > 0 {
        Some(&schedule.concepts[&schedule.segments[seg_ix - 1].concept_id])
    } else {
        None
    };
    let len = (seg.end_month - seg.start_month) as f64;
    let pos = (month - seg.start_month + 1) as f64 / len;

    let mut rng = seed::stream_rng(seed, "stream-month", &[u64::from(month)]);
    let mut features = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);

    // Incremental segments morph a single effective concept; gradual ones
    // pick old or new per sample.
    let interpolated = match (seg.transition, previous) {
        (TransitionKind::Incremental, Some(prev)) => Some(interpolate(prev, current, pos)),
        _ => None,
    };

    for _ in 0..count {
        let params: &ConceptParams = match (seg.transition, previous, &interpolated) {
            (TransitionKind::Gradual, Some(prev), _) => {
                if rng.gen::<f64>() < pos {
                    current
                } else {
                    prev
                }
            }
            (_, _, Some(morph)) => morph,
            _ => current,
        };
        let mut label = u8::from(rng.gen::<f64>() < params.malware_fraction);
        let mean = if label == 1 {
            &params.malware_mean
        } else {
            &params.benign_mean
        };
        for &mu in &mean[..dim] {
            let n: f64 = StandardNormal.sample(&mut rng);
            features.push(mu + params.covariance_scale * n);
        }
        if params.label_flip_rate > 0.0 && rng.gen::<f64>() < params.label_flip_rate {
            label = 1 - label;
        }
        labels.push(label);
    }

    Ok(LabeledBatch {
        features,
        feature_dim: dim,
        labels,
        month,
        true_concept: seg.concept_id.clone(),
    })
}

fn interpolate(old: &ConceptParams, new: &ConceptParams, pos: f64) -> ConceptParams {
    let lerp = |a: f64, b: f64| a + (b - a) * pos;
    ConceptParams {
        benign_mean: old
            .benign_mean
            .iter()
            .zip(&new.benign_mean)
            .map(|(&a, &b)| lerp(a, b))
            .collect(),
        malware_mean: old
            .malware_mean
            .iter()
            .zip(&new.malware_mean)
            .map(|(&a, &b)| lerp(a, b))
            .collect(),
        covariance_scale: lerp(old.covariance_scale, new.covariance_scale),
        label_flip_rate: lerp(old.label_flip_rate, new.label_flip_rate),
        malware_fraction: lerp(old.malware_fraction, new.malware_fraction),
    }
}
