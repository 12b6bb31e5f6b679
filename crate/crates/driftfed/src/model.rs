//! Binary classifiers trained at clients and served at endpoints.
//!
//! Two architectures share one flat parameter vector so federated
//! averaging can treat them uniformly: plain logistic regression and a
//! one-hidden-layer ReLU network. Training is minibatch gradient descent
//! with first/second moment accumulators (decay 0.9 / 0.999, epsilon
//! 1e-8) on class-weighted binary cross-entropy, computed from logits
//! for numerical stability. Every epoch records the mean training loss
//! and the loss on a held-out validation set; that trace feeds the
//! stability checks that decide when a model is ready to deploy.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::stream::LabeledBatch;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch feature dim {got} does not match model dim {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("batch contains a single class; class weights undefined")]
    SingleClass,
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error("loss diverged to a non-finite value at epoch {epoch}")]
    Diverged { epoch: usize },
}

/// Classifier architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Logistic,
    Mlp { hidden: usize },
}

impl Arch {
    /// Total scalar parameter count for input dimension `dim`.
    ///
    /// Logistic: `dim + 1`. MLP: `dim * h` input weights, `h` hidden
    /// biases, `h` output weights, one output bias.
    pub fn param_count(&self, dim: usize) -> usize {
        match *self {
            Arch::Logistic => dim + 1,
            Arch::Mlp { hidden } => dim * hidden + 2 * hidden + 1,
        }
    }
}

/// A model: architecture plus flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Arch,
    pub dim: usize,
    pub weights: Vec<f64>,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Hard epoch cap; stability checks may stop training earlier.
    pub max_epochs: usize,
    /// Seed for the per-epoch shuffle order.
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.003,
            batch_size: 4,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl TrainHyper {
    /// A zero learning rate is permitted (training becomes a no-op);
    /// negative or non-finite rates are not.
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(ModelError::BadHyper(
                "learning_rate must be finite and nonnegative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(ModelError::BadHyper("batch_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(ModelError::BadHyper("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses, one entry per completed epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    /// Per-epoch generalization gap `val_loss - train_loss`.
    pub fn gap(&self) -> Vec<f64> {
        self.val_loss
            .iter()
            .zip(&self.train_loss)
            .map(|(&v, &t)| v - t)
            .collect()
    }
}

/// Initialize parameters: weights drawn uniformly from
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero. Deterministic for
/// `(arch, dim, init_seed)`.
pub fn init_model(arch: Arch, dim: usize, init_seed: u64) -> ModelParams {
    let n = arch.param_count(dim);
    let mut rng = seed::stream_rng(init_seed, "model-init", &[dim as u64]);
    let mut weights = vec![0.0; n];
    match arch {
        Arch::Logistic => {
            let a = 1.0 / (dim as f64).sqrt();
            for v in weights.iter_mut().take(dim) {
                *v = rng.gen_range(-a..=a);
            }
        }
        Arch::Mlp { hidden } => {
            let a_in = 1.0 / (dim as f64).sqrt();
            for v in weights.iter_mut().take(dim * hidden) {
                *v = rng.gen_range(-a_in..=a_in);
            }
            let a_out = 1.0 / (hidden as f64).sqrt();
            for v in weights[dim * hidden + hidden..dim * hidden + 2 * hidden].iter_mut() {
                *v = rng.gen_range(-a_out..=a_out);
            }
        }
    }
    ModelParams { arch, dim, weights }
}

/// Inverse-square-root class weights, normalized so the two weights
/// average to one: `w_c = (1/sqrt(n_c)) / z` with
/// `z = ((1/sqrt(n_0)) + (1/sqrt(n_1))) / 2`.
pub fn class_weights(labels: &[u8]) -> Result<(f64, f64), ModelError> {
    if labels.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(ModelError::SingleClass);
    }
    let r0 = 1.0 / (n0 as f64).sqrt();
    let r1 = 1.0 / (n1 as f64).sqrt();
    let z = (r0 + r1) / 2.0;
    Ok((r0 / z, r1 / z))
}

/// Raw pre-sigmoid output for one sample.
fn logit(params: &ModelParams, row: &[f64]) -> f64 {
    let d = params.dim;
    let w = &params.weights;
    match params.arch {
        Arch::Logistic => {
            let mut z = w[d];
            for j in 0..d {
                z += w[j] * row[j];
            }
            z
        }
        Arch::Mlp { hidden } => {
            let (w1, rest) = w.split_at(d * hidden);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(hidden);
            let mut z = b2[0];
            for h in 0..hidden {
                let mut a = b1[h];
                for j in 0..d {
                    a += w1[h * d + j] * row[j];
                }
                if a > 0.0 {
                    z += w2[h] * a;
                }
            }
            z
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probability that `row` is malware (label 1).
pub fn predict_confidence(params: &ModelParams, row: &[f64]) -> f64 {
    assert_eq!(row.len(), params.dim, "feature dim mismatch");
    sigmoid(logit(params, row))
}

/// Confidences for every sample of a batch, in batch order.
pub fn predict_batch(params: &ModelParams, batch: &LabeledBatch) -> Vec<f64> {
    assert_eq!(batch.feature_dim, params.dim, "feature dim mismatch");
    (0..batch.len())
        .map(|i| sigmoid(logit(params, batch.row(i))))
        .collect()
}

/// Stable weighted BCE from the logit:
/// `w * (max(z, 0) - z*y + ln(1 + exp(-|z|)))`.
fn bce_from_logit(z: f64, y: f64, w: f64) -> f64 {
    w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
}

/// Accumulate the gradient of the weighted BCE for one sample into `grad`.
/// Returns the sample's loss. The output-layer error is `w * (sigma(z) - y)`.
fn accumulate_grad(params: &ModelParams, row: &[f64], y: f64, w: f64, grad: &mut [f64]) -> f64 {
    let d = params.dim;
    match params.arch {
        Arch::Logistic => {
            let z = logit(params, row);
            let err = w * (sigmoid(z) - y);
            for j in 0..d {
                grad[j] += err * row[j];
            }
            grad[d] += err;
            bce_from_logit(z, y, w)
        }
        Arch::Mlp { hidden } => {
            let ws = &params.weights;
            let (w1, rest) = ws.split_at(d * hidden);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(hidden);
            // forward, keeping post-ReLU activations
            let mut act = vec![0.0; hidden];
            let mut z = b2[0];
            for h in 0..hidden {
                let mut a = b1[h];
                for j in 0..d {
                    a += w1[h * d + j] * row[j];
                }
                if a > 0.0 {
                    act[h] = a;
                    z += w2[h] * a;
                }
            }
            let err = w * (sigmoid(z) - y);
            let (g1, grest) = grad.split_at_mut(d * hidden);
            let (gb1, grest) = grest.split_at_mut(hidden);
            let (g2, gb2) = grest.split_at_mut(hidden);
            gb2[0] += err;
            for h in 0..hidden {
                if act[h] > 0.0 {
                    g2[h] += err * act[h];
                    let back = err * w2[h];
                    gb1[h] += back;
                    for j in 0..d {
                        g1[h * d + j] += back * row[j];
                    }
                }
            }
            bce_from_logit(z, y, w)
        }
    }
}

/// Mean gradient of the weighted BCE over a batch. Matches [`mean_loss`]:
/// `d mean_loss / d weights[k]` for every parameter, bias included.
pub fn mean_loss_gradient(
    params: &ModelParams,
    batch: &LabeledBatch,
    weights: (f64, f64),
) -> Vec<f64> {
    assert!(!batch.is_empty(), "gradient of an empty batch");
    let mut grad = vec![0.0; params.weights.len()];
    for i in 0..batch.len() {
        let y = batch.labels[i] as f64;
        let w = if batch.labels[i] == 1 { weights.1 } else { weights.0 };
        accumulate_grad(params, batch.row(i), y, w, &mut grad);
    }
    let n = batch.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    grad
}

/// Mean loss of `params` over a batch under fixed class weights.
pub fn mean_loss(params: &ModelParams, batch: &LabeledBatch, weights: (f64, f64)) -> f64 {
    let mut total = 0.0;
    for i in 0..batch.len() {
        let y = batch.labels[i] as f64;
        let w = if batch.labels[i] == 1 { weights.1 } else { weights.0 };
        total += bce_from_logit(logit(params, batch.row(i)), y, w);
    }
    total / batch.len() as f64
}

/// Incremental trainer: owns the parameters, the optimizer moments, and
/// the shuffle RNG, so training can proceed one epoch at a time while a
/// stability check watches the loss trace between epochs.
pub struct Trainer {
    params: ModelParams,
    hyper: TrainHyper,
    /// Apply inverse-sqrt class weights to the loss.
    weighted: bool,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    rng: ChaCha8Rng,
    trace: LossTrace,
}

impl Trainer {
    pub fn new(params: ModelParams, hyper: TrainHyper, weighted: bool) -> Result<Self, ModelError> {
        hyper.validate()?;
        let n = params.weights.len();
        Ok(Trainer {
            params,
            hyper,
            weighted,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            rng: seed::stream_rng(hyper.seed, "model-train", &[]),
            trace: LossTrace::default(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn trace(&self) -> &LossTrace {
        &self.trace
    }

    pub fn epochs_run(&self) -> usize {
        self.trace.len()
    }

    /// Run one epoch over `train` and evaluate on `val`; returns
    /// `(train_loss, val_loss)` and appends them to the trace. The
    /// validation loss uses the same class weights as the training
    /// objective so the two losses share scale.
    pub fn step_epoch(
        &mut self,
        train: &LabeledBatch,
        val: &LabeledBatch,
    ) -> Result<(f64, f64), ModelError> {
        if train.is_empty() || val.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if train.feature_dim != self.params.dim {
            return Err(ModelError::DimMismatch {
                got: train.feature_dim,
                want: self.params.dim,
            });
        }
        if val.feature_dim != self.params.dim {
            return Err(ModelError::DimMismatch {
                got: val.feature_dim,
                want: self.params.dim,
            });
        }
        let weights = if self.weighted {
            class_weights(&train.labels)?
        } else {
            (1.0, 1.0)
        };

        let n_params = self.params.weights.len();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut grad = vec![0.0; n_params];
        let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut epoch_loss = 0.0;

        for chunk in order.chunks(self.hyper.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let y = train.labels[i] as f64;
                let w = if train.labels[i] == 1 { weights.1 } else { weights.0 };
                epoch_loss += accumulate_grad(&self.params, train.row(i), y, w, &mut grad);
            }
            let scale = 1.0 / chunk.len() as f64;
            self.t += 1;
            let bc1 = 1.0 - beta1.powi(self.t as i32);
            let bc2 = 1.0 - beta2.powi(self.t as i32);
            for (k, &raw) in grad.iter().enumerate() {
                let g = raw * scale;
                self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                let m_hat = self.m[k] / bc1;
                let v_hat = self.v[k] / bc2;
                self.params.weights[k] -=
                    self.hyper.learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }

        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = mean_loss(&self.params, val, weights);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(ModelError::Diverged {
                epoch: self.trace.len(),
            });
        }
        self.trace.train_loss.push(train_loss);
        self.trace.val_loss.push(val_loss);
        Ok((train_loss, val_loss))
    }
}

/// Train for exactly `hyper.max_epochs` epochs. Deterministic for
/// identical `(params, sets, hyper, weighted)`.
pub fn train(
    params: &ModelParams,
    train_set: &LabeledBatch,
    val_set: &LabeledBatch,
    hyper: &TrainHyper,
    weighted: bool,
) -> Result<(ModelParams, LossTrace), ModelError> {
    let mut trainer = Trainer::new(params.clone(), *hyper, weighted)?;
    for _ in 0..hyper.max_epochs {
        trainer.step_epoch(train_set, val_set)?;
    }
    let Trainer { params, trace, .. } = trainer;
    Ok((params, trace))
}

/// F1 of the malware class at an explicit decision threshold. A sample
/// is predicted positive iff its confidence is strictly above the
/// threshold. Returns 0 when precision + recall is 0.
pub fn f1_score_at(confidences: &[f64], labels: &[u8], threshold: f64) -> f64 {
    assert_eq!(confidences.len(), labels.len(), "length mismatch");
    assert!(!labels.is_empty(), "f1 of an empty sample is undefined");
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &y) in confidences.iter().zip(labels) {
        let pred = p > threshold;
        match (pred, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// [`f1_score_at`] with the default 0.5 threshold.
pub fn f1_score(confidences: &[f64], labels: &[u8]) -> f64 {
    f1_score_at(confidences, labels, 0.5)
}

/// Evaluate a model's F1 on a labeled batch at threshold 0.5.
pub fn evaluate_f1(params: &ModelParams, batch: &LabeledBatch) -> f64 {
    f1_score(&predict_batch(params, batch), &batch.labels)
}
