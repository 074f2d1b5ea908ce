//! Central finite-difference gradient checking.
//!
//! Relative error is `|a − n| / max(|a|, |n|, floor)` with `floor = 1e-6`, so
//! components whose true gradient is numerically zero are compared on an
//! absolute scale instead of amplifying round-off.

use super::{Network, NnError, Tensor};

/// Default step for float64 checks.
pub const DEFAULT_STEP: f64 = 1e-5;

const REL_FLOOR: f64 = 1e-6;

/// Central differences of `f` around `x`.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest componentwise relative error.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Options for [`check_network_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Fault injection for exercising the checker itself: the analytic
    /// gradient of the named layer is scaled by 1.5 before comparison.
    pub fault_layer: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            fault_layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradError {
    pub layer: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares backpropagated parameter gradients against central differences,
/// layer by layer.
///
/// `loss(net, batch, backprop)` must run a train-mode forward pass, return
/// the scalar loss and, when `backprop` is set, accumulate its gradients
/// into `net`. It must be deterministic.
pub fn check_network_gradients<L>(
    net: &Network,
    batch: &Tensor,
    loss: L,
    opts: &GradCheckOptions,
) -> Result<Vec<LayerGradError>, NnError>
where
    L: Fn(&mut Network, &Tensor, bool) -> Result<f64, NnError>,
{
    let mut analytic_net = net.clone();
    analytic_net.params_mut().zero_grad();
    loss(&mut analytic_net, batch, true)?;
    let mut reports = Vec::new();
    for (layer, indices) in net.layer_params() {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for idx in indices {
            let tensor = net.params().get(idx);
            if !tensor.trainable() {
                continue;
            }
            let mut analytic = analytic_net.params().get(idx).grad().data().to_vec();
            if opts.fault_layer.as_deref() == Some(layer.as_str()) {
                analytic.iter_mut().for_each(|g| *g *= 1.5);
            }
            let base = tensor.value().data().to_vec();
            let mut failure = None;
            let numeric = finite_difference(
                |values| {
                    let mut probe = net.clone();
                    probe.params_mut().get_mut(idx).value_mut().data_mut().copy_from_slice(values);
                    match loss(&mut probe, batch, false) {
                        Ok(v) => v,
                        Err(e) => {
                            failure = Some(e);
                            f64::NAN
                        }
                    }
                },
                &base,
                opts.step,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            worst = worst.max(max_relative_error(&analytic, &numeric));
            checked += base.len();
        }
        if checked > 0 {
            reports.push(LayerGradError {
                layer,
                max_rel_error: worst,
                checked,
            });
        }
    }
    Ok(reports)
}
