//! Loss functions: softmax cross-entropy and smooth L1.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Numerically stable softmax over a flat logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy against a single class label.
///
/// Returns `(-ln softmax(logits)[label], softmax(logits) - onehot(label))`.
/// Stabilized with log-sum-exp, so huge logits do not overflow.
pub fn softmax_ce_loss(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let n = logits.numel();
    if n < 2 {
        return Err(Error::Config(format!("softmax needs >= 2 classes, got {n}")));
    }
    if label >= n {
        return Err(Error::Config(format!("label {label} out of range for {n} classes")));
    }
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum_exp = max + logits.data().iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    let loss = log_sum_exp - logits.data()[label];
    let mut grad = Tensor::from_vec(
        logits.shape(),
        logits.data().iter().map(|&v| (v - log_sum_exp).exp()).collect(),
    );
    grad.data_mut()[label] -= 1.0;
    Ok((loss, grad))
}

/// Smooth L1 over paired vectors, summed elementwise:
/// `0.5 u^2` for `|u| < 1`, else `|u| - 0.5`, with `u = pred - target`.
/// Gradient wrt `pred` is `u` inside the quadratic zone and `sign(u)` outside.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len(), "smooth_l1 length mismatch");
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let u = p - t;
            if u.abs() < 1.0 {
                loss += 0.5 * u * u;
                u
            } else {
                loss += u.abs() - 0.5;
                u.signum()
            }
        })
        .collect();
    (loss, grad)
}
