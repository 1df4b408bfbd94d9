use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Float, Result, Tape, Tensor, TensorError, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of parameter tensors.
///
/// Order is the creation order, which is deterministic for a given config. Checkpoints
/// store tensors by name, so the order only matters for binding to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub(crate) fn add(&mut self, name: String, tensor: Tensor<F>) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// He-style fan-in uniform kernel: `U(-a, a)` with `a = gain * sqrt(6 / fan_in)`, variance `2 gain^2 / fan_in`.
    pub(crate) fn add_kernel(
        &mut self,
        name: String,
        shape: [usize; 4],
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let a = gain * (6.0 / fan_in).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| F::c(rng.random_range(-a..a)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Record every parameter on `tape`, as leaves when `trainable`, else as constants.
    /// The returned vector is indexed by [`ParamId`].
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> Vec<Var<'t, F>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Overwrite every parameter from a name-keyed table. Every name must be present with
    /// the same shape; extra entries are an error too.
    pub fn load_named(&mut self, mut table: HashMap<String, Tensor<F>>) -> Result<()> {
        let mut fresh = Vec::with_capacity(self.len());
        for (name, cur) in self.names.iter().zip(&self.tensors) {
            let t = table
                .remove(name)
                .ok_or_else(|| TensorError::Format(format!("missing parameter {name}")))?;
            if t.shape() != cur.shape() {
                return Err(TensorError::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
            fresh.push(t);
        }
        if let Some(extra) = table.keys().next() {
            return Err(TensorError::Format(format!("unexpected parameter {extra}")));
        }
        self.tensors = fresh;
        Ok(())
    }
}
