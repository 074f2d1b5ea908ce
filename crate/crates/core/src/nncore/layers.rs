use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::gemm;
use super::{ModelParams, NnError, ParamTensor, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Declarative description of one feature-extractor layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { outputs: usize, bias: bool },
    /// Stride 1, no padding.
    Conv2d { out_channels: usize, kernel: usize },
    /// 2x2 window, stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    Relu,
    /// Per-channel normalization (per-feature after a dense layer).
    BatchNorm,
}

/// Per-example activation geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn flat(width: usize) -> Self {
        Self {
            channels: width,
            height: 1,
            width: 1,
        }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn spatial(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Dense {
        weight: usize,
        bias: Option<usize>,
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        weight: usize,
        bias: usize,
        input: InputShape,
        out_channels: usize,
        kernel: usize,
    },
    MaxPool2 {
        input: InputShape,
    },
    Relu,
    BatchNorm {
        gamma: usize,
        beta: usize,
        running_mean: usize,
        running_var: usize,
        channels: usize,
        spatial: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Dense { input: Tensor },
    Conv { cols: Vec<f64> },
    Pool { argmax: Vec<usize>, input_len: usize },
    Relu { mask: Vec<bool> },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

impl Layer {
    /// Instantiates `spec` on top of `input`, appending its tensors to
    /// `tensors`. Returns the layer and its output geometry.
    pub(crate) fn build(
        spec: LayerSpec,
        index: usize,
        input: InputShape,
        tensors: &mut Vec<ParamTensor>,
        rng: &mut impl Rng,
    ) -> Result<(Layer, InputShape), NnError> {
        match spec {
            LayerSpec::Dense { outputs, bias } => {
                let inputs = input.len();
                if outputs == 0 || inputs == 0 {
                    return Err(NnError::InvalidArgument(format!("dense{index}: zero-width layer")));
                }
                let bound = 1.0 / (inputs as f64).sqrt();
                let weight = tensors.len();
                tensors.push(ParamTensor::new(
                    format!("dense{index}.weight"),
                    uniform_tensor(rng, &[inputs, outputs], bound),
                    false,
                    true,
                ));
                let bias = if bias {
                    tensors.push(ParamTensor::new(
                        format!("dense{index}.bias"),
                        uniform_tensor(rng, &[outputs], bound),
                        false,
                        true,
                    ));
                    Some(tensors.len() - 1)
                } else {
                    None
                };
                Ok((
                    Layer::Dense {
                        weight,
                        bias,
                        inputs,
                        outputs,
                    },
                    InputShape::flat(outputs),
                ))
            }
            LayerSpec::Conv2d { out_channels, kernel } => {
                if kernel == 0 || kernel > input.height || kernel > input.width || out_channels == 0 {
                    return Err(NnError::ShapeMismatch {
                        layer: format!("conv{index}"),
                        expected: format!("input at least {kernel}x{kernel}"),
                        actual: format!("{}x{}x{}", input.channels, input.height, input.width),
                    });
                }
                let fan_in = input.channels * kernel * kernel;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = tensors.len();
                tensors.push(ParamTensor::new(
                    format!("conv{index}.weight"),
                    uniform_tensor(rng, &[out_channels, input.channels, kernel, kernel], bound),
                    false,
                    true,
                ));
                tensors.push(ParamTensor::new(
                    format!("conv{index}.bias"),
                    uniform_tensor(rng, &[out_channels], bound),
                    false,
                    true,
                ));
                let out = InputShape::image(out_channels, input.height - kernel + 1, input.width - kernel + 1);
                Ok((
                    Layer::Conv2d {
                        weight,
                        bias: weight + 1,
                        input,
                        out_channels,
                        kernel,
                    },
                    out,
                ))
            }
            LayerSpec::MaxPool2 => {
                if input.height < 2 || input.width < 2 {
                    return Err(NnError::ShapeMismatch {
                        layer: format!("pool{index}"),
                        expected: "spatial extent >= 2x2".into(),
                        actual: format!("{}x{}", input.height, input.width),
                    });
                }
                Ok((
                    Layer::MaxPool2 { input },
                    InputShape::image(input.channels, input.height / 2, input.width / 2),
                ))
            }
            LayerSpec::Relu => Ok((Layer::Relu, input)),
            LayerSpec::BatchNorm => {
                let channels = input.channels;
                let gamma = tensors.len();
                let prefix = format!("bn{index}");
                tensors.push(ParamTensor::new(format!("{prefix}.gamma"), Tensor::filled(&[channels], 1.0), true, true));
                tensors.push(ParamTensor::new(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true, true));
                tensors.push(ParamTensor::new(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), true, false));
                tensors.push(ParamTensor::new(format!("{prefix}.running_var"), Tensor::filled(&[channels], 1.0), true, false));
                Ok((
                    Layer::BatchNorm {
                        gamma,
                        beta: gamma + 1,
                        running_mean: gamma + 2,
                        running_var: gamma + 3,
                        channels,
                        spatial: input.spatial(),
                    },
                    input,
                ))
            }
        }
    }

    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv",
            Layer::MaxPool2 { .. } => "pool",
            Layer::Relu => "relu",
            Layer::BatchNorm { .. } => "bn",
        }
    }

    /// Indices of the tensors this layer owns.
    pub(crate) fn param_indices(&self) -> Vec<usize> {
        match *self {
            Layer::Dense { weight, bias, .. } => std::iter::once(weight).chain(bias).collect(),
            Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![gamma, beta, running_mean, running_var],
            Layer::MaxPool2 { .. } | Layer::Relu => Vec::new(),
        }
    }

    pub(crate) fn forward_eval(&self, params: &ModelParams, x: &Tensor) -> Tensor {
        match self {
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                channels,
                spatial,
            } => {
                let g = params.get(*gamma).value().data();
                let b = params.get(*beta).value().data();
                let mean = params.get(*running_mean).value().data();
                let var = params.get(*running_var).value().data();
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(channels * spatial) {
                    for c in 0..*channels {
                        let inv = 1.0 / (var[c] + BN_EPS).sqrt();
                        for v in &mut row[c * spatial..(c + 1) * spatial] {
                            *v = g[c] * (*v - mean[c]) * inv + b[c];
                        }
                    }
                }
                out
            }
            _ => self.forward_stateless(params, x).0,
        }
    }

    pub(crate) fn forward_train(&self, params: &mut ModelParams, x: &Tensor) -> (Tensor, Cache) {
        match self {
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                channels,
                spatial,
            } => {
                let (channels, spatial) = (*channels, *spatial);
                let n = x.rows();
                let count = (n * spatial) as f64;
                let row_len = channels * spatial;
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for row in x.data().chunks(row_len) {
                    for c in 0..channels {
                        mean[c] += row[c * spatial..(c + 1) * spatial].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for row in x.data().chunks(row_len) {
                    for c in 0..channels {
                        var[c] += row[c * spatial..(c + 1) * spatial]
                            .iter()
                            .map(|v| (v - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let g = params.get(*gamma).value().data().to_vec();
                let b = params.get(*beta).value().data().to_vec();
                let mut out = x.clone();
                let mut xhat = vec![0.0; x.len()];
                for (row, hat_row) in out.data_mut().chunks_mut(row_len).zip(xhat.chunks_mut(row_len)) {
                    for c in 0..channels {
                        for s in c * spatial..(c + 1) * spatial {
                            let h = (row[s] - mean[c]) * inv_std[c];
                            hat_row[s] = h;
                            row[s] = g[c] * h + b[c];
                        }
                    }
                }
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let rm = params.get_mut(*running_mean).value_mut().data_mut();
                for (r, m) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = params.get_mut(*running_var).value_mut().data_mut();
                for (r, v) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
                (out, Cache::BatchNorm { xhat, inv_std })
            }
            _ => {
                let (out, cache) = self.forward_stateless(params, x);
                (out, cache.expect("stateless layers always produce a cache"))
            }
        }
    }

    fn forward_stateless(&self, params: &ModelParams, x: &Tensor) -> (Tensor, Option<Cache>) {
        let n = x.rows();
        match self {
            Layer::Dense {
                weight,
                bias,
                inputs,
                outputs,
            } => {
                let mut out = Tensor::zeros(&[n, *outputs]);
                if let Some(b) = bias {
                    let b = params.get(*b).value().data();
                    for row in out.data_mut().chunks_mut(*outputs) {
                        row.copy_from_slice(b);
                    }
                }
                let w = params.get(*weight).value().data();
                gemm(n, *inputs, *outputs, 1.0, x.data(), false, w, false, 1.0, out.data_mut());
                let input = x.clone().flatten_rows();
                (out, Some(Cache::Dense { input }))
            }
            Layer::Conv2d {
                weight,
                bias,
                input,
                out_channels,
                kernel,
            } => {
                let (oh, ow) = (input.height - kernel + 1, input.width - kernel + 1);
                let positions = oh * ow;
                let patch = input.channels * kernel * kernel;
                let cols = im2col(x.data(), n, *input, *kernel);
                let mut tmp = vec![0.0; n * positions * out_channels];
                let w = params.get(*weight).value().data();
                gemm(n * positions, patch, *out_channels, 1.0, &cols, false, w, true, 0.0, &mut tmp);
                let b = params.get(*bias).value().data();
                let mut out = Tensor::zeros(&[n, out_channels * positions]);
                for (img, out_row) in out.data_mut().chunks_mut(out_channels * positions).enumerate() {
                    let src = &tmp[img * positions * out_channels..(img + 1) * positions * out_channels];
                    for p in 0..positions {
                        for oc in 0..*out_channels {
                            out_row[oc * positions + p] = src[p * out_channels + oc] + b[oc];
                        }
                    }
                }
                (out, Some(Cache::Conv { cols }))
            }
            Layer::MaxPool2 { input } => {
                let (oh, ow) = (input.height / 2, input.width / 2);
                let in_len = input.len();
                let out_len = input.channels * oh * ow;
                let mut out = Tensor::zeros(&[n, out_len]);
                let mut argmax = vec![0usize; n * out_len];
                for img in 0..n {
                    let src = x.row(img);
                    let dst = out.row_mut(img);
                    for c in 0..input.channels {
                        let base = c * input.spatial();
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = base + (2 * oy) * input.width + 2 * ox;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = base + (2 * oy + dy) * input.width + 2 * ox + dx;
                                    if src[idx] > src[best] {
                                        best = idx;
                                    }
                                }
                                let o = c * oh * ow + oy * ow + ox;
                                dst[o] = src[best];
                                argmax[img * out_len + o] = img * in_len + best;
                            }
                        }
                    }
                }
                (out, Some(Cache::Pool { argmax, input_len: n * in_len }))
            }
            Layer::Relu => {
                let mut out = x.clone().flatten_rows();
                let mask: Vec<bool> = out.data().iter().map(|&v| v > 0.0).collect();
                for (v, &keep) in out.data_mut().iter_mut().zip(&mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
                (out, Some(Cache::Relu { mask }))
            }
            Layer::BatchNorm { .. } => unreachable!("batch norm is handled by the stateful paths"),
        }
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// layer input. With `input_grad = false` a conv layer skips that
    /// product and returns an empty tensor.
    pub(crate) fn backward(&self, params: &mut ModelParams, cache: Cache, grad: &Tensor, input_grad: bool) -> Tensor {
        let n = grad.rows();
        match (self, cache) {
            (
                Layer::Dense {
                    weight,
                    bias,
                    inputs,
                    outputs,
                },
                Cache::Dense { input },
            ) => {
                gemm(
                    *inputs,
                    n,
                    *outputs,
                    1.0,
                    input.data(),
                    true,
                    grad.data(),
                    false,
                    1.0,
                    params.get_mut(*weight).grad_mut().data_mut(),
                );
                if let Some(b) = bias {
                    let gb = params.get_mut(*b).grad_mut().data_mut();
                    for row in grad.data().chunks(*outputs) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
                let mut dx = Tensor::zeros(&[n, *inputs]);
                let w = params.get(*weight).value().data();
                gemm(n, *outputs, *inputs, 1.0, grad.data(), false, w, true, 0.0, dx.data_mut());
                dx
            }
            (
                Layer::Conv2d {
                    weight,
                    bias,
                    input,
                    out_channels,
                    kernel,
                },
                Cache::Conv { cols },
            ) => {
                let oc = *out_channels;
                let positions = (input.height - kernel + 1) * (input.width - kernel + 1);
                let patch = input.channels * kernel * kernel;
                let mut g_tmp = vec![0.0; n * positions * oc];
                for (img, g_row) in grad.data().chunks(oc * positions).enumerate() {
                    let dst = &mut g_tmp[img * positions * oc..(img + 1) * positions * oc];
                    for c in 0..oc {
                        for p in 0..positions {
                            dst[p * oc + c] = g_row[c * positions + p];
                        }
                    }
                }
                gemm(
                    oc,
                    n * positions,
                    patch,
                    1.0,
                    &g_tmp,
                    true,
                    &cols,
                    false,
                    1.0,
                    params.get_mut(*weight).grad_mut().data_mut(),
                );
                let gb = params.get_mut(*bias).grad_mut().data_mut();
                for row in g_tmp.chunks(oc) {
                    for (g, v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                if !input_grad {
                    return Tensor::zeros(&[0, input.len()]);
                }
                let mut dcols = vec![0.0; n * positions * patch];
                let w = params.get(*weight).value().data();
                gemm(n * positions, oc, patch, 1.0, &g_tmp, false, w, false, 0.0, &mut dcols);
                let mut dx = Tensor::zeros(&[n, input.len()]);
                col2im(&dcols, n, *input, *kernel, dx.data_mut());
                dx
            }
            (Layer::MaxPool2 { input }, Cache::Pool { argmax, input_len }) => {
                let mut dx = vec![0.0; input_len];
                for (&src, &g) in argmax.iter().zip(grad.data()) {
                    dx[src] += g;
                }
                Tensor::new(vec![n, input.len()], dx).expect("pool backward shape")
            }
            (Layer::Relu, Cache::Relu { mask }) => {
                let mut dx = grad.clone().flatten_rows();
                for (v, keep) in dx.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
                dx
            }
            (
                Layer::BatchNorm {
                    gamma,
                    beta,
                    channels,
                    spatial,
                    ..
                },
                Cache::BatchNorm { xhat, inv_std },
            ) => {
                let (channels, spatial) = (*channels, *spatial);
                let row_len = channels * spatial;
                let count = (n * spatial) as f64;
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for (g_row, h_row) in grad.data().chunks(row_len).zip(xhat.chunks(row_len)) {
                    for c in 0..channels {
                        for s in c * spatial..(c + 1) * spatial {
                            sum_g[c] += g_row[s];
                            sum_gx[c] += g_row[s] * h_row[s];
                        }
                    }
                }
                let g = params.get(*gamma).value().data().to_vec();
                for (acc, v) in params.get_mut(*gamma).grad_mut().data_mut().iter_mut().zip(&sum_gx) {
                    *acc += v;
                }
                for (acc, v) in params.get_mut(*beta).grad_mut().data_mut().iter_mut().zip(&sum_g) {
                    *acc += v;
                }
                let mut dx = Tensor::zeros(&[n, row_len]);
                for ((d_row, g_row), h_row) in dx
                    .data_mut()
                    .chunks_mut(row_len)
                    .zip(grad.data().chunks(row_len))
                    .zip(xhat.chunks(row_len))
                {
                    for c in 0..channels {
                        let k = g[c] * inv_std[c] / count;
                        for s in c * spatial..(c + 1) * spatial {
                            d_row[s] = k * (count * g_row[s] - sum_g[c] - h_row[s] * sum_gx[c]);
                        }
                    }
                }
                dx
            }
            (layer, _) => panic!("cache kind does not match layer {}", layer.kind()),
        }
    }
}

fn im2col(x: &[f64], n: usize, input: InputShape, kernel: usize) -> Vec<f64> {
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (h - kernel + 1, w - kernel + 1);
    let patch = input.channels * kernel * kernel;
    let in_len = input.len();
    let mut cols = vec![0.0; n * oh * ow * patch];
    for img in 0..n {
        let src = &x[img * in_len..(img + 1) * in_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst_base = ((img * oh + oy) * ow + ox) * patch;
                let mut q = 0;
                for c in 0..input.channels {
                    for ky in 0..kernel {
                        let row = c * h * w + (oy + ky) * w + ox;
                        cols[dst_base + q..dst_base + q + kernel].copy_from_slice(&src[row..row + kernel]);
                        q += kernel;
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], n: usize, input: InputShape, kernel: usize, dx: &mut [f64]) {
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (h - kernel + 1, w - kernel + 1);
    let patch = input.channels * kernel * kernel;
    let in_len = input.len();
    for img in 0..n {
        let dst = &mut dx[img * in_len..(img + 1) * in_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let src_base = ((img * oh + oy) * ow + ox) * patch;
                let mut q = 0;
                for c in 0..input.channels {
                    for ky in 0..kernel {
                        let row = c * h * w + (oy + ky) * w + ox;
                        for kx in 0..kernel {
                            dst[row + kx] += cols[src_base + q + kx];
                        }
                        q += kernel;
                    }
                }
            }
        }
    }
}
