use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kernel::{base_bandwidth, mmd_pair_with_bandwidth};
use super::{KernelConfig, LossError};
use crate::nncore::Tensor;

/// Which classes of a minibatch enter the CDD term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassSubset {
    /// Every class with enough examples in the batch.
    AllPresent,
    /// A seeded random subset of this size drawn from the eligible classes.
    Random(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CddConfig {
    pub class_subset: ClassSubset,
    /// `N_k`: examples (and Gaussian samples) per selected class. `None`
    /// takes every batch example of the class.
    pub samples_per_class: Option<usize>,
    pub kernel: KernelConfig,
    /// Let gradients flow through the Gaussian samples into `w_G`
    /// (`z̃ = w_G^k + √λ·ε`). Off by default: samples are constants.
    pub reparameterize: bool,
}

impl Default for CddConfig {
    fn default() -> Self {
        Self {
            class_subset: ClassSubset::AllPresent,
            samples_per_class: None,
            kernel: KernelConfig::default(),
            reparameterize: false,
        }
    }
}

impl CddConfig {
    /// Smallest per-class count a class needs to be eligible.
    pub fn min_per_class(&self) -> usize {
        self.samples_per_class.unwrap_or(2).max(2)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        self.kernel.validate()?;
        if let ClassSubset::Random(s) = self.class_subset {
            if s < 2 {
                return Err(LossError::InvalidConfig(format!("class subset size {s} < 2")));
            }
        }
        if let Some(n) = self.samples_per_class {
            if n < 2 {
                return Err(LossError::InvalidConfig(format!("samples per class {n} < 2")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CddValue {
    pub value: f64,
    /// Mean intra-class MMD (minimized).
    pub intra: f64,
    /// Mean inter-class MMD (maximized).
    pub inter: f64,
    pub feature_grads: BTreeMap<usize, Tensor>,
    pub target_grads: BTreeMap<usize, Tensor>,
    /// Base bandwidth used for each `(feature class, target class)` pair.
    pub bandwidths: BTreeMap<(usize, usize), f64>,
}

fn check_classes(features: &BTreeMap<usize, Tensor>, targets: &BTreeMap<usize, Tensor>) -> Result<(), LossError> {
    if !features.keys().eq(targets.keys()) {
        return Err(LossError::ShapeMismatch(format!(
            "feature classes {:?} differ from target classes {:?}",
            features.keys().collect::<Vec<_>>(),
            targets.keys().collect::<Vec<_>>()
        )));
    }
    if features.len() < 2 {
        return Err(LossError::TooFewClasses(features.len()));
    }
    Ok(())
}

/// Contrastive domain discrepancy between per-class features and per-class
/// target samples:
///
/// `(1/|C'|)·Σ_k MMD(f_k, t_k) − (1/(|C'|(|C'|−1)))·Σ_{k₁≠k₂} MMD(f_{k₁}, t_{k₂})`.
pub fn cdd_loss(
    features_by_class: &BTreeMap<usize, Tensor>,
    targets_by_class: &BTreeMap<usize, Tensor>,
    cfg: &CddConfig,
) -> Result<CddValue, LossError> {
    cfg.kernel.validate()?;
    check_classes(features_by_class, targets_by_class)?;
    let mut bandwidths = BTreeMap::new();
    for (&k1, f) in features_by_class {
        for (&k2, t) in targets_by_class {
            if f.rows() == 0 || t.rows() == 0 {
                return Err(LossError::EmptySet("class point set"));
            }
            bandwidths.insert((k1, k2), base_bandwidth(f, t, &cfg.kernel));
        }
    }
    cdd_loss_with_bandwidths(features_by_class, targets_by_class, &cfg.kernel.multipliers, &bandwidths)
}

/// [`cdd_loss`] with an explicit base bandwidth for every class pair.
pub fn cdd_loss_with_bandwidths(
    features_by_class: &BTreeMap<usize, Tensor>,
    targets_by_class: &BTreeMap<usize, Tensor>,
    multipliers: &[f64],
    bandwidths: &BTreeMap<(usize, usize), f64>,
) -> Result<CddValue, LossError> {
    check_classes(features_by_class, targets_by_class)?;
    let c = features_by_class.len() as f64;
    let intra_w = 1.0 / c;
    let inter_w = 1.0 / (c * (c - 1.0));
    let mut feature_grads: BTreeMap<usize, Tensor> = features_by_class
        .iter()
        .map(|(&k, t)| (k, Tensor::zeros(t.shape())))
        .collect();
    let mut target_grads: BTreeMap<usize, Tensor> = targets_by_class
        .iter()
        .map(|(&k, t)| (k, Tensor::zeros(t.shape())))
        .collect();
    let mut intra_sum = 0.0;
    let mut inter_sum = 0.0;
    for (&k1, f) in features_by_class {
        for (&k2, t) in targets_by_class {
            let sigma2 = *bandwidths
                .get(&(k1, k2))
                .ok_or_else(|| LossError::InvalidConfig(format!("missing bandwidth for class pair ({k1}, {k2})")))?;
            let mmd = mmd_pair_with_bandwidth(f, t, multipliers, sigma2)?;
            let w = if k1 == k2 {
                intra_sum += mmd.value;
                intra_w
            } else {
                inter_sum += mmd.value;
                -inter_w
            };
            feature_grads.get_mut(&k1).expect("class key").add_scaled(&mmd.grad_a, w);
            target_grads.get_mut(&k2).expect("class key").add_scaled(&mmd.grad_b, w);
        }
    }
    let intra = intra_sum * intra_w;
    let inter = inter_sum * inter_w;
    Ok(CddValue {
        value: intra - inter,
        intra,
        inter,
        feature_grads,
        target_grads,
        bandwidths: bandwidths.clone(),
    })
}
