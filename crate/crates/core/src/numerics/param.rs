use rand::Rng as _;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Handle to one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors with matching gradient buffers.
///
/// Initialization draws from a stream seeded by `seed`, in the order the
/// tensors are added, so two sets built the same way from the same seed are
/// bit-identical.
#[derive(Clone, Debug)]
pub struct ParamSet {
    seed: u64,
    rng: Rng,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: rng::seeded(seed),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Adds a tensor initialized uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.push(name, Tensor::from_vec(shape, data).expect("valid shape"))
    }

    pub fn add_tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value)
    }

    fn push(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter name {name}");
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        self.values[id.0].data()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.values[id.0].data_mut()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        self.grads[id.0].data()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.grads[id.0].data_mut()
    }

    /// Value and gradient of one parameter, borrowed together.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&[f64], &mut [f64]) {
        (self.values[id.0].data(), self.grads[id.0].data_mut())
    }

    /// Mutable value and its gradient, for optimizer updates.
    pub fn value_mut_and_grad(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        (self.values[id.0].data_mut(), self.grads[id.0].data())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn fill_values(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| v.fill(value));
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Overwrites values from named tensors. Every parameter must be present
    /// with its exact shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }

    /// Copies all values from another set with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamSet) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }

    /// Stable fingerprint of all values (bit patterns), used to assert
    /// frozen networks stay frozen.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for (name, v) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for x in v.data() {
                hasher.update(&x.to_le_bytes());
            }
        }
        hasher.finalize()
    }
}
