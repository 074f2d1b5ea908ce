use serde::{Deserialize, Serialize};

use super::{LossError, LossValue};
use crate::nncore::Tensor;

/// Reference matrix for the covariance term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovReference {
    /// `Σ = γ·λ·I` (γ times the per-class Gaussian covariance).
    ScaledClassCovariance,
    /// An explicit diagonal, used as is.
    Diagonal(Vec<f64>),
    /// Penalize off-diagonal entries only; the diagonal is unconstrained.
    OffDiagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovConfig {
    /// `β`, the weight of the term in the stage loss.
    pub weight: f64,
    /// `γ`.
    pub gamma: f64,
    /// `λ`, the per-class Gaussian variance.
    pub lambda: f64,
    pub reference: CovReference,
}

impl Default for CovConfig {
    fn default() -> Self {
        Self {
            weight: 1.0,
            gamma: 100.0,
            lambda: 0.01,
            reference: CovReference::ScaledClassCovariance,
        }
    }
}

impl CovConfig {
    /// Diagonal of the reference matrix for feature width `m`; `None` for
    /// the off-diagonal-only variant.
    pub fn reference_diagonal(&self, m: usize) -> Result<Option<Vec<f64>>, LossError> {
        match &self.reference {
            CovReference::ScaledClassCovariance => Ok(Some(vec![self.gamma * self.lambda; m])),
            CovReference::Diagonal(d) => {
                if d.len() != m {
                    return Err(LossError::ShapeMismatch(format!("reference diagonal has {} entries, m = {m}", d.len())));
                }
                if d.iter().any(|v| *v < 0.0) {
                    return Err(LossError::InvalidConfig("reference diagonal entries must be >= 0".into()));
                }
                Ok(Some(d.clone()))
            }
            CovReference::OffDiagonal => Ok(None),
        }
    }
}

fn check_rows(z: &Tensor) -> Result<(usize, usize), LossError> {
    if z.shape().len() != 2 {
        return Err(LossError::ShapeMismatch(format!("expected n x m features, got {:?}", z.shape())));
    }
    if z.rows() < 2 {
        return Err(LossError::TooFewRows { needed: 2, got: z.rows() });
    }
    Ok((z.rows(), z.shape()[1]))
}

fn centered(z: &Tensor) -> Tensor {
    let (n, m) = (z.rows(), z.shape()[1]);
    let mut mean = vec![0.0; m];
    for row in z.iter_rows() {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut c = z.clone();
    for row in c.data_mut().chunks_mut(m) {
        for (v, mu) in row.iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    c
}

/// `(1/(n−1))·(z − z̄)ᵀ(z − z̄)`.
pub fn batch_covariance(z: &Tensor) -> Result<Tensor, LossError> {
    let (n, m) = check_rows(z)?;
    let c = centered(z);
    let mut cov = Tensor::zeros(&[m, m]);
    crate::nncore::linalg::gemm(m, n, m, 1.0 / (n as f64 - 1.0), c.data(), true, c.data(), false, 0.0, cov.data_mut());
    Ok(cov)
}

/// Given `G = dL/dΣ_z` (symmetric), `dL/dz = (2/(n−1))·(z − z̄)·G`.
fn grad_through_covariance(centered: &Tensor, g: &Tensor) -> Tensor {
    let (n, m) = (centered.rows(), centered.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    crate::nncore::linalg::gemm(n, m, m, 2.0 / (n as f64 - 1.0), centered.data(), false, g.data(), false, 0.0, out.data_mut());
    out
}

/// `(1/m)·Σ_ij (Σ_z − Σ)²_ij` against a diagonal reference.
pub fn cov_loss_against(z: &Tensor, reference_diag: &[f64]) -> Result<LossValue, LossError> {
    let (_, m) = check_rows(z)?;
    if reference_diag.len() != m {
        return Err(LossError::ShapeMismatch(format!("reference diagonal {} vs m = {m}", reference_diag.len())));
    }
    let c = centered(z);
    let mut diff = batch_covariance(z)?;
    for (i, r) in reference_diag.iter().enumerate() {
        let v = diff.get2(i, i) - r;
        diff.set2(i, i, v);
    }
    let mf = m as f64;
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / mf;
    diff.scale(2.0 / mf);
    Ok(LossValue {
        value,
        grad: grad_through_covariance(&c, &diff),
    })
}

/// `(1/m)·Σ_{i≠j} [Σ_z]²_ij`.
pub fn offdiag_cov_loss(z: &Tensor) -> Result<LossValue, LossError> {
    let (_, m) = check_rows(z)?;
    let c = centered(z);
    let mut g = batch_covariance(z)?;
    for i in 0..m {
        g.set2(i, i, 0.0);
    }
    let mf = m as f64;
    let value = g.data().iter().map(|d| d * d).sum::<f64>() / mf;
    g.scale(2.0 / mf);
    Ok(LossValue {
        value,
        grad: grad_through_covariance(&c, &g),
    })
}

/// The configured covariance term (without the `β` weight).
pub fn cov_loss(z: &Tensor, cfg: &CovConfig) -> Result<LossValue, LossError> {
    let (_, m) = check_rows(z)?;
    match cfg.reference_diagonal(m)? {
        Some(d) => cov_loss_against(z, &d),
        None => offdiag_cov_loss(z),
    }
}
