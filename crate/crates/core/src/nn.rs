//! Named parameter storage and dense-layer initialisation.

use rand::Rng;

use crate::ad::{Tape, Tensor, Var};
use crate::scalar::Real;

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Appends a tensor; returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor<T> {
        &self.entries[slot].1
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.entries[slot].1
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a leaf; the returned vars follow slot order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect()
    }
}

/// Uniform He-style weights `[fan_in, fan_out]` and zero bias.
pub fn dense_init<T: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> (Tensor<T>, Tensor<T>) {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| T::of(rng.gen_range(-bound..=bound)))
        .collect();
    (
        Tensor::new(vec![fan_in, fan_out], w).expect("dense shape"),
        Tensor::zeros(&[fan_out]),
    )
}

/// All-zero layer, used for output heads that must start at the identity.
pub fn zero_init<T: Real>(fan_in: usize, fan_out: usize) -> (Tensor<T>, Tensor<T>) {
    (Tensor::zeros(&[fan_in, fan_out]), Tensor::zeros(&[fan_out]))
}
