use super::{NnError, Tensor};

/// One named parameter (or statistics) tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    name: String,
    value: Tensor,
    grad: Tensor,
    is_batch_norm: bool,
    trainable: bool,
}

impl ParamTensor {
    pub(crate) fn new(name: impl Into<String>, value: Tensor, is_batch_norm: bool, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            is_batch_norm,
            trainable,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    /// Batch-norm affine parameters and running statistics carry this flag;
    /// federated aggregation leaves them untouched.
    pub fn is_batch_norm(&self) -> bool {
        self.is_batch_norm
    }

    /// Running statistics are state, not trainable parameters.
    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// Every tensor of a `G∘F` model, in construction order.
///
/// The classifier weight `w_G` is stored as an `m x K` matrix so that column
/// `k` is the class-`k` feature anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<ParamTensor>,
    classifier: usize,
}

impl ModelParams {
    pub(crate) fn new(tensors: Vec<ParamTensor>, classifier: usize) -> Self {
        Self { tensors, classifier }
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn get(&self, idx: usize) -> &ParamTensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut ParamTensor {
        &mut self.tensors[idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn classifier_index(&self) -> usize {
        self.classifier
    }

    /// `w_G`, shape `m x K`.
    pub fn classifier(&self) -> &Tensor {
        &self.tensors[self.classifier].value
    }

    pub fn classifier_mut(&mut self) -> &mut Tensor {
        &mut self.tensors[self.classifier].value
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier().shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.classifier().shape()[1]
    }

    /// `w_G^k`, the k-th classifier column.
    pub fn classifier_column(&self, k: usize) -> Vec<f64> {
        let w = self.classifier();
        let (m, classes) = (w.shape()[0], w.shape()[1]);
        (0..m).map(|i| w.data()[i * classes + k]).collect()
    }

    /// Total number of scalars across all tensors (trainable or not).
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    /// Checks that `other` has the same tensor names, shapes and flags.
    pub fn check_compatible(&self, other: &ModelParams) -> Result<(), NnError> {
        if self.tensors.len() != other.tensors.len() {
            return Err(NnError::ShapeMismatch {
                layer: "params".into(),
                expected: format!("{} tensors", self.tensors.len()),
                actual: format!("{} tensors", other.tensors.len()),
            });
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.is_batch_norm != b.is_batch_norm {
                return Err(NnError::ShapeMismatch {
                    layer: a.name.clone(),
                    expected: format!("{} {:?}", a.name, a.value.shape()),
                    actual: format!("{} {:?}", b.name, b.value.shape()),
                });
            }
        }
        Ok(())
    }

    /// Copies every value (not gradients) from `other`.
    pub fn copy_values_from(&mut self, other: &ModelParams) -> Result<(), NnError> {
        self.check_compatible(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }

    /// Copies values from `other`, leaving batch-norm tensors as they are.
    pub fn copy_non_batch_norm_from(&mut self, other: &ModelParams) -> Result<(), NnError> {
        self.check_compatible(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if !a.is_batch_norm {
                a.value.data_mut().copy_from_slice(b.value.data());
            }
        }
        Ok(())
    }

    pub fn has_batch_norm(&self) -> bool {
        self.tensors.iter().any(|t| t.is_batch_norm)
    }

    /// Flattened copy of every trainable value, in tensor order.
    pub fn flat_trainable_values(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .flat_map(|t| t.value.data().iter().copied())
            .collect()
    }

    pub fn flat_trainable_grads(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .flat_map(|t| t.grad.data().iter().copied())
            .collect()
    }
}
