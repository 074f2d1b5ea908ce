use serde::{Deserialize, Serialize};

use super::LossError;
use crate::nncore::Tensor;

/// How the base bandwidth `σ²` of the RBF sum is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Median pairwise squared distance over the union of both point sets,
    /// recomputed on every call and treated as a constant for gradients.
    MedianHeuristic,
    Fixed(f64),
}

/// Sum of RBF kernels `Σ_c exp(−‖a−b‖² / (2·c·σ²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub multipliers: Vec<f64>,
    pub bandwidth: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            multipliers: vec![0.5, 1.0, 2.0],
            bandwidth: Bandwidth::MedianHeuristic,
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigma2: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigma2),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.multipliers.is_empty() {
            return Err(LossError::InvalidConfig("kernel needs at least one bandwidth multiplier".into()));
        }
        if let Some(c) = self.multipliers.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(LossError::InvalidConfig(format!("bandwidth multiplier {c} must be positive")));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(LossError::InvalidConfig(format!("fixed bandwidth {s} must be positive")));
            }
        }
        Ok(())
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kernel value and its derivative with respect to the squared distance.
fn kernel_from_sq_dist(d2: f64, multipliers: &[f64], sigma2: f64) -> (f64, f64) {
    let mut k = 0.0;
    let mut dk = 0.0;
    for &c in multipliers {
        let s = 2.0 * c * sigma2;
        let e = (-d2 / s).exp();
        k += e;
        dk -= e / s;
    }
    (k, dk)
}

pub fn rbf_kernel(a: &[f64], b: &[f64], cfg: &KernelConfig, sigma2_base: f64) -> f64 {
    kernel_from_sq_dist(squared_distance(a, b), &cfg.multipliers, sigma2_base).0
}

/// Median of the squared distances over all unordered pairs `i < j`.
/// Returns `None` for fewer than two points.
pub fn median_pairwise_sq_distance<'a>(points: impl IntoIterator<Item = &'a [f64]>) -> Option<f64> {
    let pts: Vec<&[f64]> = points.into_iter().collect();
    let mut d: Vec<f64> = Vec::with_capacity(pts.len() * pts.len().saturating_sub(1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(squared_distance(pts[i], pts[j]));
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    Some(if d.len() % 2 == 1 { d[mid] } else { 0.5 * (d[mid - 1] + d[mid]) })
}

/// Base bandwidth for a pair of point sets. A degenerate median (all
/// points coincide, or a single point) falls back to 1.
pub fn base_bandwidth(a: &Tensor, b: &Tensor, cfg: &KernelConfig) -> f64 {
    match cfg.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::MedianHeuristic => {
            let med = median_pairwise_sq_distance(a.iter_rows().chain(b.iter_rows())).unwrap_or(0.0);
            if med > 1e-12 {
                med
            } else {
                1.0
            }
        }
    }
}

/// Biased MMD estimate with gradients w.r.t. both point sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MmdValue {
    pub value: f64,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
    /// Base bandwidth actually used.
    pub sigma2: f64,
}

/// Sums after sorting, so the result does not depend on the input order.
fn order_free_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn check_sets(a: &Tensor, b: &Tensor) -> Result<(), LossError> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(LossError::EmptySet("mmd point set"));
    }
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(LossError::ShapeMismatch(format!(
            "mmd point sets {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(1/N₁²)ΣΣ𝕂(aᵢ,aⱼ) + (1/N₂²)ΣΣ𝕂(bᵢ,bⱼ) − (2/(N₁N₂))ΣΣ𝕂(aᵢ,bⱼ)`,
/// diagonal terms included.
pub fn mmd_pair(a: &Tensor, b: &Tensor, cfg: &KernelConfig) -> Result<MmdValue, LossError> {
    cfg.validate()?;
    check_sets(a, b)?;
    let sigma2 = base_bandwidth(a, b, cfg);
    mmd_pair_with_bandwidth(a, b, &cfg.multipliers, sigma2)
}

/// [`mmd_pair`] with an explicit base bandwidth.
pub fn mmd_pair_with_bandwidth(a: &Tensor, b: &Tensor, multipliers: &[f64], sigma2: f64) -> Result<MmdValue, LossError> {
    check_sets(a, b)?;
    let (n1, n2, m) = (a.rows(), b.rows(), a.shape()[1]);
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let mut grad_a = Tensor::zeros(&[n1, m]);
    let mut grad_b = Tensor::zeros(&[n2, m]);

    let within = |x: &Tensor, grad: &mut Tensor, scale: f64| -> f64 {
        let n = x.rows();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (xi, xj) = (x.row(i), x.row(j));
                let (k, dk) = kernel_from_sq_dist(squared_distance(xi, xj), multipliers, sigma2);
                total += k;
                if i != j {
                    // i appears as both arguments of the symmetric sum.
                    let coef = 2.0 * scale * dk * 2.0;
                    for (g, (p, q)) in grad.row_mut(i).iter_mut().zip(xi.iter().zip(xj)) {
                        *g += coef * (p - q);
                    }
                }
            }
        }
        total
    };
    let saa = within(a, &mut grad_a, 1.0 / (n1f * n1f));
    let sbb = within(b, &mut grad_b, 1.0 / (n2f * n2f));

    let cross_scale = -2.0 / (n1f * n2f);
    let mut cross = Vec::with_capacity(n1 * n2);
    for i in 0..n1 {
        for j in 0..n2 {
            let (ai, bj) = (a.row(i), b.row(j));
            let (k, dk) = kernel_from_sq_dist(squared_distance(ai, bj), multipliers, sigma2);
            cross.push(k);
            let coef = cross_scale * dk * 2.0;
            for (g, (p, q)) in grad_a.row_mut(i).iter_mut().zip(ai.iter().zip(bj)) {
                *g += coef * (p - q);
            }
            for (g, (p, q)) in grad_b.row_mut(j).iter_mut().zip(ai.iter().zip(bj)) {
                *g -= coef * (p - q);
            }
        }
    }
    let sab = order_free_sum(cross);
    let value = saa / (n1f * n1f) + sbb / (n2f * n2f) - 2.0 * sab / (n1f * n2f);
    Ok(MmdValue {
        value,
        grad_a,
        grad_b,
        sigma2,
    })
}
