//! Pseudo-labels for unlabeled client data: probability-weighted class
//! centroids, nearest-centroid assignment under cosine distance, then
//! refinement passes with hard (one-hot) weights.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignlosses::softmax_rows;
use crate::nncore::{NnError, Network, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PseudoLabelError {
    #[error("no examples to label")]
    Empty,
    #[error("length mismatch: {0} pseudo-labels vs {1} true labels")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pass count must be at least 1")]
    NoPasses,
    #[error(transparent)]
    Network(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    /// `1 − cos(z, c)`; a zero vector is at distance 1 from everything.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: Vec<usize>,
    /// `K x m`, the centroids of the final pass.
    pub centroids: Tensor,
    pub metric: DistanceMetric,
    pub passes: usize,
}

pub const DEFAULT_PASSES: usize = 2;

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(z: &[f64], centroids: &Tensor) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter_rows().enumerate() {
        let d = cosine_distance(z, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Weighted centroids `c_k = Σᵢ wᵢₖ zᵢ / Σᵢ wᵢₖ`; classes with zero total
/// weight keep `prior` row `k` (or zeros without a prior).
fn weighted_centroids(features: &Tensor, weights: &Tensor, prior: Option<&Tensor>) -> Tensor {
    let (k, m) = (weights.shape()[1], features.shape()[1]);
    let mut c = Tensor::zeros(&[k, m]);
    let mut mass = vec![0.0; k];
    for (z, w) in features.iter_rows().zip(weights.iter_rows()) {
        for (j, &wj) in w.iter().enumerate() {
            if wj == 0.0 {
                continue;
            }
            mass[j] += wj;
            for (cv, zv) in c.row_mut(j).iter_mut().zip(z) {
                *cv += wj * zv;
            }
        }
    }
    for (j, &total) in mass.iter().enumerate() {
        if total > 0.0 {
            c.row_mut(j).iter_mut().for_each(|v| *v /= total);
        } else if let Some(p) = prior {
            c.row_mut(j).copy_from_slice(p.row(j));
        }
    }
    c
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.set2(i, l, 1.0);
    }
    t
}

/// Labels from features `z` (n x m) and class probabilities (n x K).
pub fn pseudo_labels_from_features(
    features: &Tensor,
    probs: &Tensor,
    passes: usize,
) -> Result<PseudoLabelSet, PseudoLabelError> {
    if passes == 0 {
        return Err(PseudoLabelError::NoPasses);
    }
    if features.rows() == 0 {
        return Err(PseudoLabelError::Empty);
    }
    if features.shape().len() != 2 || probs.shape().len() != 2 || probs.rows() != features.rows() {
        return Err(PseudoLabelError::ShapeMismatch(format!(
            "features {:?} vs probabilities {:?}",
            features.shape(),
            probs.shape()
        )));
    }
    let classes = probs.shape()[1];
    let mut centroids = weighted_centroids(features, probs, None);
    let mut labels: Vec<usize> = features.iter_rows().map(|z| nearest(z, &centroids)).collect();
    for _ in 1..passes {
        centroids = weighted_centroids(features, &one_hot(&labels, classes), Some(&centroids));
        labels = features.iter_rows().map(|z| nearest(z, &centroids)).collect();
    }
    Ok(PseudoLabelSet {
        labels,
        centroids,
        metric: DistanceMetric::Cosine,
        passes,
    })
}

/// Eval-mode features and softmax outputs of `net` on `data`, then
/// [`pseudo_labels_from_features`].
pub fn generate_pseudo_labels_with_passes(
    net: &Network,
    data: &Tensor,
    passes: usize,
) -> Result<PseudoLabelSet, PseudoLabelError> {
    if data.rows() == 0 {
        return Err(PseudoLabelError::Empty);
    }
    let z = net.features(data)?;
    let probs = softmax_rows(&net.classify(&z)?);
    pseudo_labels_from_features(&z, &probs, passes)
}

pub fn generate_pseudo_labels(net: &Network, data: &Tensor) -> Result<PseudoLabelSet, PseudoLabelError> {
    generate_pseudo_labels_with_passes(net, data, DEFAULT_PASSES)
}

/// Fraction of pseudo-labels equal to the true labels.
pub fn pseudo_label_accuracy(set: &PseudoLabelSet, truth: &[usize]) -> Result<f64, PseudoLabelError> {
    if set.labels.len() != truth.len() {
        return Err(PseudoLabelError::LengthMismatch(set.labels.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(PseudoLabelError::Empty);
    }
    let hits = set.labels.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}
