//! Class-weighted focal loss.
//!
//! Weights follow inverse-frequency weighting alpha_c = N / (K * N_c) over
//! the training-split counts of the fold at hand; the focal factor
//! (1 - p)^gamma down-weights well-classified samples. With gamma = 0 and
//! unit weights the loss reduces exactly to mean cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Probability floor inside the logarithm; keeps saturated wrong predictions
/// finite.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-class loss weights, index order (benign = 0, malignant = 1, normal = 2).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub alpha: Vec<f64>,
}

/// alpha_c = N / (K * N_c) for the supplied per-class counts.
pub fn class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::Config("class_weights needs at least one class".into()));
    }
    if let Some(zero) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!(
            "class {zero} has zero samples; inverse-frequency weight undefined"
        )));
    }
    let n: usize = counts.iter().sum();
    let k = counts.len();
    let alpha = counts.iter().map(|&c| n as f64 / (k as f64 * c as f64)).collect();
    Ok(ClassWeights { alpha })
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights { alpha: vec![1.0; k] }
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }
}

/// Focal loss of a batch of logits against integer labels:
/// -(1/B) * sum_i alpha_{y_i} * (1 - p_{y_i})^gamma * log(p_{y_i}),
/// with row-wise softmax probabilities. Differentiable through the tape.
pub fn focal_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    weights: &ClassWeights,
    gamma: f64,
) -> Result<Var> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    let (rows, k) = match tape.shape(logits) {
        [k] => (1, *k),
        [r, k] => (*r, *k),
        other => {
            return Err(Error::Dimension(format!(
                "focal_loss expects [K] or [B,K] logits, got {other:?}"
            )))
        }
    };
    if labels.len() != rows {
        return Err(Error::Data(format!(
            "{} labels for a batch of {rows} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    if weights.alpha.len() != k {
        return Err(Error::Dimension(format!(
            "{} class weights for {k} classes",
            weights.alpha.len()
        )));
    }
    let probs = tape.softmax_rows(logits)?;
    let p_true = tape.gather_per_row(probs, labels)?;
    let one_minus = tape.affine_const(p_true, -1.0, 1.0);
    let focal = tape.pow_const(one_minus, gamma);
    let log_p = tape.ln_clamped(p_true, PROB_FLOOR);
    let per_sample = tape.mul(focal, log_p)?;
    let alpha_per_sample: Vec<f64> = labels.iter().map(|&y| weights.alpha[y]).collect();
    let weighted = tape.mul_const(per_sample, alpha_per_sample)?;
    let total = tape.sum_all(weighted);
    Ok(tape.affine_const(total, -1.0 / rows as f64, 0.0))
}

/// Forward-only focal loss of plain logit rows (no tape); used for
/// validation where no gradient is needed.
pub fn focal_loss_value(
    logits: &[f64],
    k: usize,
    labels: &[usize],
    weights: &ClassWeights,
    gamma: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let rows = labels.len();
    let shape = vec![rows, k];
    let v = tape.constant(logits.to_vec(), shape)?;
    let loss = focal_loss(&mut tape, v, labels, weights, gamma)?;
    Ok(tape.value(loss)[0])
}
