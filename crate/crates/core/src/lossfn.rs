//! Capped dynamic inverse-frequency cross-entropy.
//!
//! Per batch, class weights start as `1 / (f_c + eps)` from the ground-truth
//! pixel counts `f_c`, are capped at `min_j(w_j) * cap_ratio`, and are then
//! rescaled to sum to the number of classes. The loss is the weighted mean
//! of `-log softmax` at the true class over every pixel in the batch.
//! Weights are constants with respect to the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskcore::{class_pixel_counts, LabelMask};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1.0;
pub const DEFAULT_CAP_RATIO: f64 = 10.0;
/// Lower bound applied to log-probabilities.
pub const LOG_PROB_FLOOR: f64 = -50.0;

/// Ground-truth pixel count per class, pooled over one batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFrequencies {
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_hat: Vec<f64>,
    pub epsilon: f64,
    pub cap_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Option<Tensor>,
}

pub fn batch_frequencies(gt_batch: &[LabelMask]) -> Result<ClassFrequencies> {
    let first = gt_batch.first().ok_or(Error::EmptyInput("ground-truth batch"))?;
    let mut counts = vec![0u64; first.num_classes()];
    for m in gt_batch {
        if m.num_classes() != counts.len() {
            return Err(Error::DimensionMismatch {
                left: format!("C={}", counts.len()),
                right: format!("C={}", m.num_classes()),
            });
        }
        for (a, b) in counts.iter_mut().zip(class_pixel_counts(m).counts) {
            *a += b;
        }
    }
    Ok(ClassFrequencies { counts })
}

pub fn capped_weights(f: &ClassFrequencies, epsilon: f64, cap_ratio: f64) -> Result<LossWeights> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(cap_ratio >= 1.0) {
        return Err(Error::InvalidConfig(format!("cap ratio must be at least 1, got {cap_ratio}")));
    }
    if f.counts.is_empty() {
        return Err(Error::EmptyInput("class frequencies"));
    }
    let raw: Vec<f64> = f.counts.iter().map(|&n| 1.0 / (n as f64 + epsilon)).collect();
    let floor = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let cap = floor * cap_ratio;
    let capped: Vec<f64> = raw.iter().map(|&w| w.min(cap)).collect();
    let sum: f64 = capped.iter().sum();
    let c = capped.len() as f64;
    Ok(LossWeights {
        w_hat: capped.iter().map(|w| w / sum * c).collect(),
        epsilon,
        cap_ratio,
    })
}

/// Weighted pixel-wise cross-entropy over a `(B, C, H, W)` logit tensor.
///
/// The gradient, when requested, is `w_y * (softmax - onehot(y)) / N` per
/// pixel with `N = B·H·W`.
pub fn weighted_ce_loss(
    logits: &Tensor,
    gt_batch: &[LabelMask],
    weights: &LossWeights,
    with_gradient: bool,
) -> Result<LossValue> {
    let [b, c, h, w] = logits.shape();
    if gt_batch.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{b} logit samples but {} masks",
            gt_batch.len()
        )));
    }
    if weights.w_hat.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "{c} logit channels but {} class weights",
            weights.w_hat.len()
        )));
    }
    for m in gt_batch {
        if m.width() != w || m.height() != h || m.num_classes() != c {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} C={} vs logits {w}x{h} C={c}",
                m.width(),
                m.height(),
                m.num_classes()
            )));
        }
    }
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut grad = with_gradient.then(|| Tensor::zeros(logits.shape()));
    let mut probs = vec![0.0; c];
    let mut total = 0.0;
    for (s, mask) in gt_batch.iter().enumerate() {
        let x = logits.sample(s);
        for (p, &label) in mask.labels().iter().enumerate() {
            let y = label as usize;
            let max = (0..c).map(|k| x[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, pr) in probs.iter_mut().enumerate() {
                *pr = (x[k * hw + p] - max).exp();
                z += *pr;
            }
            let log_p = (x[y * hw + p] - max - z.ln()).max(LOG_PROB_FLOOR);
            let wy = weights.w_hat[y];
            total += -wy * log_p;
            if let Some(g) = grad.as_mut() {
                let gs = g.sample_mut(s);
                let scale = wy / n;
                for (k, pr) in probs.iter().enumerate() {
                    let onehot = if k == y { 1.0 } else { 0.0 };
                    gs[k * hw + p] = scale * (pr / z - onehot);
                }
            }
        }
    }
    Ok(LossValue {
        loss: total / n,
        grad,
    })
}
