use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Layer};
use super::{InputShape, LayerSpec, ModelParams, NnError, ParamTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, activation caching.
    Train,
    /// Running statistics; no state is touched.
    Eval,
}

/// Preset feature extractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Conv(32, 5x5) → ReLU → MaxPool2 → Conv(64, 5x5) → ReLU → MaxPool2 →
    /// Dense(features) → ReLU. Stand-in for the RotatedMNIST network.
    Cnn { features: usize, batch_norm: bool },
    /// Dense(hidden) → ReLU → Dense(features) → ReLU.
    Mlp { hidden: usize, features: usize, batch_norm: bool },
    /// `F` is the identity; only the classifier is trainable.
    Identity,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Cnn {
            features: 128,
            batch_norm: false,
        }
    }
}

impl Architecture {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        use LayerSpec::*;
        match *self {
            Architecture::Cnn { features, batch_norm } => {
                let mut specs = Vec::new();
                for out_channels in [32, 64] {
                    specs.push(Conv2d { out_channels, kernel: 5 });
                    if batch_norm {
                        specs.push(BatchNorm);
                    }
                    specs.push(Relu);
                    specs.push(MaxPool2);
                }
                specs.push(Dense {
                    outputs: features,
                    bias: true,
                });
                if batch_norm {
                    specs.push(BatchNorm);
                }
                specs.push(Relu);
                specs
            }
            Architecture::Mlp {
                hidden,
                features,
                batch_norm,
            } => {
                let mut specs = Vec::new();
                for outputs in [hidden, features] {
                    specs.push(Dense { outputs, bias: true });
                    if batch_norm {
                        specs.push(BatchNorm);
                    }
                    specs.push(Relu);
                }
                specs
            }
            Architecture::Identity => Vec::new(),
        }
    }

    pub fn build(&self, input: InputShape, classes: usize, seed: u64) -> Result<Network, NnError> {
        Network::new(input, &self.layer_specs(), classes, seed)
    }
}

/// `G∘F`: a feature extractor `F` (layer sequence) followed by a bias-free
/// linear classifier `G` with weight `w_G ∈ R^{m×K}`.
#[derive(Debug, Clone)]
pub struct Network {
    input: InputShape,
    layers: Vec<Layer>,
    params: ModelParams,
    caches: Option<Vec<Cache>>,
}

impl Network {
    /// Builds a network with PyTorch-style uniform(±1/sqrt(fan_in))
    /// initialization drawn from a ChaCha stream seeded by `seed`.
    pub fn new(input: InputShape, feature_layers: &[LayerSpec], classes: usize, seed: u64) -> Result<Self, NnError> {
        if classes == 0 || input.is_empty() {
            return Err(NnError::InvalidArgument("network needs a non-empty input and at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        let mut layers = Vec::with_capacity(feature_layers.len());
        let mut shape = input;
        for (i, spec) in feature_layers.iter().enumerate() {
            let (layer, out) = Layer::build(*spec, i, shape, &mut tensors, &mut rng)?;
            layers.push(layer);
            shape = out;
        }
        let m = shape.len();
        let bound = 1.0 / (m as f64).sqrt();
        let mut w = Tensor::zeros(&[m, classes]);
        for v in w.data_mut() {
            *v = rand::Rng::random_range(&mut rng, -bound..bound);
        }
        let classifier = tensors.len();
        tensors.push(ParamTensor::new("classifier.weight", w, false, true));
        Ok(Self {
            input,
            layers,
            params: ModelParams::new(tensors, classifier),
            caches: None,
        })
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn input_dim(&self) -> usize {
        self.input.len()
    }

    /// `m`.
    pub fn feature_dim(&self) -> usize {
        self.params.feature_dim()
    }

    /// `K`.
    pub fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// `(layer name, tensor indices)` for every feature layer plus the
    /// classifier, in forward order.
    pub fn layer_params(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("{}{i}", l.kind()), l.param_indices()))
            .collect();
        out.push(("classifier".into(), vec![self.params.classifier_index()]));
        out
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), NnError> {
        if batch.shape().is_empty() || batch.row_len() != self.input.len() {
            return Err(NnError::ShapeMismatch {
                layer: "input".into(),
                expected: format!("[n, {}]", self.input.len()),
                actual: format!("{:?}", batch.shape()),
            });
        }
        Ok(())
    }

    /// `z = F(x)`, shape `n x m`. Train mode updates batch-norm running
    /// statistics and caches activations for [`Network::backward`].
    pub fn forward_features(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        match mode {
            Mode::Eval => self.features(batch),
            Mode::Train => {
                self.check_input(batch)?;
                if batch.rows() == 0 {
                    return Err(NnError::InvalidArgument("empty training batch".into()));
                }
                let mut caches = Vec::with_capacity(self.layers.len());
                let mut x = batch.clone().flatten_rows();
                for layer in &self.layers {
                    let (out, cache) = layer.forward_train(&mut self.params, &x);
                    caches.push(cache);
                    x = out;
                }
                self.caches = Some(caches);
                Ok(x)
            }
        }
    }

    /// Eval-mode `F(x)`; never mutates the network.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(batch)?;
        let mut x = batch.clone().flatten_rows();
        for layer in &self.layers {
            x = layer.forward_eval(&self.params, &x);
        }
        Ok(x)
    }

    /// `G(z) = z · w_G`.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor, NnError> {
        let m = self.feature_dim();
        if z.shape().len() != 2 || z.shape()[1] != m {
            return Err(NnError::ShapeMismatch {
                layer: "classifier".into(),
                expected: format!("[n, {m}]"),
                actual: format!("{:?}", z.shape()),
            });
        }
        z.matmul(self.params.classifier())
    }

    /// Eval-mode logits for a raw input batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        self.classify(&self.features(batch)?)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>, NnError> {
        let logits = self.logits(batch)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    /// Accumulates `zᵀ · grad_logits` into the classifier gradient and
    /// returns `grad_logits · w_Gᵀ`, the gradient w.r.t. `z`.
    pub fn classify_backward(&mut self, z: &Tensor, grad_logits: &Tensor) -> Result<Tensor, NnError> {
        let (m, k) = (self.feature_dim(), self.num_classes());
        if grad_logits.shape() != [z.rows(), k] || z.shape() != [grad_logits.rows(), m] {
            return Err(NnError::ShapeMismatch {
                layer: "classifier".into(),
                expected: format!("z [n, {m}], grad [n, {k}]"),
                actual: format!("z {:?}, grad {:?}", z.shape(), grad_logits.shape()),
            });
        }
        let n = z.rows();
        let ci = self.params.classifier_index();
        super::linalg::gemm(
            m,
            n,
            k,
            1.0,
            z.data(),
            true,
            grad_logits.data(),
            false,
            1.0,
            self.params.get_mut(ci).grad_mut().data_mut(),
        );
        let mut dz = Tensor::zeros(&[n, m]);
        super::linalg::gemm(
            n,
            k,
            m,
            1.0,
            grad_logits.data(),
            false,
            self.params.classifier().data(),
            true,
            0.0,
            dz.data_mut(),
        );
        Ok(dz)
    }

    /// Adds `grad` to the gradient of classifier column `k`.
    pub fn accumulate_classifier_column_grad(&mut self, k: usize, grad: &[f64]) -> Result<(), NnError> {
        let (m, classes) = (self.feature_dim(), self.num_classes());
        if k >= classes || grad.len() != m {
            return Err(NnError::InvalidArgument(format!(
                "classifier column {k} with {} values (K = {classes}, m = {m})",
                grad.len()
            )));
        }
        let ci = self.params.classifier_index();
        let g = self.params.get_mut(ci).grad_mut().data_mut();
        for (i, v) in grad.iter().enumerate() {
            g[i * classes + k] += v;
        }
        Ok(())
    }

    /// Backpropagates `grad_features` (dL/dz) through `F`, accumulating into
    /// parameter gradients. Consumes the cache of the last train-mode
    /// forward pass.
    pub fn backward(&mut self, grad_features: &Tensor) -> Result<(), NnError> {
        let caches = self.caches.take().ok_or_else(|| NnError::MissingForwardCache {
            layer: self
                .layers
                .last()
                .map_or_else(|| "classifier".to_string(), |l| format!("{}{}", l.kind(), self.layers.len() - 1)),
        })?;
        let m = self.feature_dim();
        if grad_features.shape().len() != 2 || grad_features.shape()[1] != m {
            return Err(NnError::ShapeMismatch {
                layer: "features".into(),
                expected: format!("[n, {m}]"),
                actual: format!("{:?}", grad_features.shape()),
            });
        }
        let mut grad = grad_features.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            grad = layer.backward(&mut self.params, cache, &grad, i > 0);
        }
        Ok(())
    }

    pub fn has_forward_cache(&self) -> bool {
        self.caches.is_some()
    }

    /// Drops cached activations (e.g. before cloning a snapshot).
    pub fn clear_cache(&mut self) {
        self.caches = None;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
