use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<F> {
    name: String,
    value: Tensor<F>,
    grad: Vec<F>,
}

/// Named learnable tensors with gradient accumulators, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(crate::error::invalid("ParamStore::insert", format!("duplicate `{name}`")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        let grad = vec![F::zero(); value.numel()];
        self.entries.push(Entry { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[F] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.entries[id.0].grad
    }

    /// Value and gradient of one parameter, mutably and immutably.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<F>, &[F]) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Adds `scale * g` for every parameter gradient in `grads`.
    pub fn accumulate(&mut self, grads: &ParamGrads<F>, scale: F) {
        for (id, g) in &grads.entries {
            let dst = &mut self.entries[id.0].grad;
            for (d, &s) in dst.iter_mut().zip(g) {
                *d += scale * s;
            }
        }
    }

    /// Euclidean norm over every gradient entry, accumulated in f64.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm.is_finite() && norm > max_norm {
            let s = F::from_f64(max_norm / norm);
            for e in &mut self.entries {
                e.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Converts every value to another element type; gradients are reset.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.value.cast())
                .expect("names are unique in the source store");
        }
        out
    }

    /// `(name, value)` pairs in insertion order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }
}

/// Gradients of the parameters that took part in one backward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<F> {
    pub(crate) entries: Vec<(ParamId, Vec<F>)>,
}

impl<F: Scalar> ParamGrads<F> {
    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.entries.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}
