//! Classifier-anchored class Gaussians `q_k = N(w_G^k, λ·I)` and the
//! communication-overhead arithmetic for shipping them explicitly instead.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nncore::{ModelParams, Tensor};
use crate::seeding::{rng_for, stream};

/// Parameter count of torchvision's ResNet-50 (ImageNet head).
pub const RESNET50_PARAM_COUNT: u64 = 25_557_032;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatDistError {
    #[error("class {class} is outside [0, {classes})")]
    UnknownClass { class: usize, classes: usize },
    #[error("invalid variance {0}: must be finite and >= 0")]
    InvalidVariance(f64),
    #[error("sample count must be at least 1")]
    EmptySample,
}

/// Per-class Gaussians whose means are the classifier columns. The bank
/// is rebuilt from `w_G` whenever the classifier changes, so `μ_k` is
/// always bit-identical to the current `w_G^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClassBank {
    /// `m x K`, a copy of `w_G`.
    means: Tensor,
    lambda: f64,
}

impl GaussianClassBank {
    /// `λ = 0` is accepted so tests can check the degenerate case.
    pub fn new(classifier: &Tensor, lambda: f64) -> Result<Self, FeatDistError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(FeatDistError::InvalidVariance(lambda));
        }
        Ok(Self {
            means: classifier.clone(),
            lambda,
        })
    }

    pub fn from_params(params: &ModelParams, lambda: f64) -> Result<Self, FeatDistError> {
        Self::new(params.classifier(), lambda)
    }

    pub fn num_classes(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `μ_k = w_G^k`.
    pub fn mean(&self, k: usize) -> Result<Vec<f64>, FeatDistError> {
        self.check_class(k)?;
        let classes = self.num_classes();
        Ok((0..self.feature_dim()).map(|i| self.means.data()[i * classes + k]).collect())
    }

    /// Diagonal of `Σ_k = λ·I`.
    pub fn covariance_diagonal(&self) -> Vec<f64> {
        vec![self.lambda; self.feature_dim()]
    }

    fn check_class(&self, k: usize) -> Result<(), FeatDistError> {
        if k >= self.num_classes() {
            return Err(FeatDistError::UnknownClass {
                class: k,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }

    /// Standard-normal noise `ε` (n x m) for class `k`; a sample is then
    /// `μ_k + √λ·ε`. Split out so callers can reparameterize.
    pub fn noise(&self, k: usize, n: usize, seed: u64) -> Result<Tensor, FeatDistError> {
        self.check_class(k)?;
        if n == 0 {
            return Err(FeatDistError::EmptySample);
        }
        let mut rng = rng_for(&[stream::GAUSSIAN, seed, k as u64]);
        let m = self.feature_dim();
        let data = (0..n * m).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Tensor::new(vec![n, m], data).expect("n*m values"))
    }
}

/// `n` draws from `q_k`. The stream depends only on `(seed, k)`, never on
/// which other classes were sampled before.
pub fn sample_class_features(bank: &GaussianClassBank, k: usize, n: usize, seed: u64) -> Result<Tensor, FeatDistError> {
    let mut eps = bank.noise(k, n, seed)?;
    let mean = bank.mean(k)?;
    let scale = bank.lambda.sqrt();
    for row in eps.data_mut().chunks_mut(mean.len()) {
        for (v, mu) in row.iter_mut().zip(&mean) {
            *v = mu + scale * *v;
        }
    }
    Ok(eps)
}

/// What it would cost to transmit `K` means and `K` full covariances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub classes: u64,
    pub feature_dim: u64,
    /// `K·m + K·m²`.
    pub scalars_avoided: u64,
    pub model_param_count: u64,
    pub ratio: f64,
}

pub fn compute_overhead(classes: u64, feature_dim: u64, model_param_count: u64) -> OverheadReport {
    let scalars_avoided = classes * feature_dim + classes * feature_dim * feature_dim;
    OverheadReport {
        classes,
        feature_dim,
        scalars_avoided,
        model_param_count,
        ratio: scalars_avoided as f64 / model_param_count.max(1) as f64,
    }
}
