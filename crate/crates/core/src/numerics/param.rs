use crate::error::{Error, Result};

/// Handle to a tensor held by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable (or frozen) tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    trainable: bool,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("parameter `{name}` has degenerate shape {shape:?}")));
        }
        if expected != values.len() {
            return Err(Error::shape(
                "ParamTensor::new",
                format!("{name} {shape:?}"),
                format!("{} values", values.len()),
            ));
        }
        let grad = vec![0.0; values.len()];
        Ok(Self { name, shape, values, grad, trainable: true })
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Owns every parameter tensor of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, param: ParamTensor) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(ParamTensor::zero_grad);
    }

    /// Total scalar count across trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer { grads: self.params.iter().map(|p| vec![0.0; p.len()]).collect() }
    }

    /// Adds `buffer` into the stored gradients, tensor by tensor in index order.
    pub fn accumulate(&mut self, buffer: &GradBuffer) -> Result<()> {
        if buffer.grads.len() != self.params.len() {
            return Err(Error::shape(
                "ParamStore::accumulate",
                format!("{} params", self.params.len()),
                format!("{} gradient tensors", buffer.grads.len()),
            ));
        }
        for (p, g) in self.params.iter_mut().zip(&buffer.grads) {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Copies values from `other` into matching tensors; names and shapes must agree.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape(
                "ParamStore::copy_values_from",
                format!("{} params", self.len()),
                format!("{} params", other.len()),
            ));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::shape(
                    "ParamStore::copy_values_from",
                    format!("{} {:?}", dst.name, dst.shape),
                    format!("{} {:?}", src.name, src.shape),
                ));
            }
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulators detached from the store, so that
/// independent backward passes can run without sharing mutable state.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub(crate) fn add(&mut self, id: ParamId, delta: &[f64]) {
        for (g, d) in self.grads[id.0].iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}
