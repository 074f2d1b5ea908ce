//! Training losses: cross-entropy, multi-bandwidth RBF MMD, contrastive
//! domain discrepancy (CDD) and covariance matching. Every loss returns its
//! value together with the gradient w.r.t. its tensor inputs.

mod cdd;
mod covariance;
mod kernel;

pub use cdd::{cdd_loss, cdd_loss_with_bandwidths, CddConfig, CddValue, ClassSubset};
pub use covariance::{batch_covariance, cov_loss, cov_loss_against, offdiag_cov_loss, CovConfig, CovReference};
pub use kernel::{
    base_bandwidth, median_pairwise_sq_distance, mmd_pair, mmd_pair_with_bandwidth, rbf_kernel, Bandwidth,
    KernelConfig, MmdValue,
};

use thiserror::Error;

use crate::nncore::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("target {target} at row {row} is outside [0, {classes})")]
    TargetOutOfRange { row: usize, target: usize, classes: usize },
    #[error("empty {0}")]
    EmptySet(&'static str),
    #[error("need at least two classes for the inter-class term, got {0}")]
    TooFewClasses(usize),
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

/// Scalar loss with its gradient w.r.t. the loss input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

/// Mean over rows of `−log softmax(logits)[target]`; gradient
/// `(softmax − onehot)/n`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<LossValue, LossError> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(LossError::ShapeMismatch(format!(
            "logits {:?} vs {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(LossError::EmptySet("cross-entropy batch"));
    }
    let (n, classes) = (logits.rows(), logits.shape()[1]);
    if let Some((row, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= classes) {
        return Err(LossError::TargetOutOfRange { row, target, classes });
    }
    let mut grad = Tensor::zeros(&[n, classes]);
    let mut total = 0.0;
    for (i, (row, &t)) in logits.iter_rows().zip(targets).enumerate() {
        let top = crate::nncore::argmax(row);
        let max = row[top];
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        // log Σ exp(x − max) = ln(1 + rest)
        let log_z = rest.ln_1p();
        total += max - row[t] + log_z;
        let g = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            g[j] = (v - max - log_z).exp() / n as f64;
        }
        g[t] -= 1.0 / n as f64;
    }
    Ok(LossValue {
        value: total / n as f64,
        grad,
    })
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let w = logits.row_len();
    for row in out.data_mut().chunks_mut(w.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

#[cfg(test)]
mod tests;
