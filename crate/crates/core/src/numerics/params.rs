//! Named parameter tensors and gradient accumulation across examples.

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tape::Tape;
use super::tensor::Tensor;

/// Stable index of a parameter inside [`Parameters`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// An ordered collection of named tensors.
///
/// Order is part of the model's identity: checkpoints, optimizer state and
/// gradient buffers all index parameters by position.
#[derive(Clone, Debug, Default)]
pub struct Parameters<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Parameters<S> {
    pub fn new() -> Self {
        Parameters { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar coordinates across all tensors.
    pub fn num_coordinates(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].1
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// Adds a tape's parameter gradients into the tensors' grad buffers.
    pub fn accumulate_from(&mut self, tape: &Tape<S>) {
        for (slot, g) in tape.param_grads() {
            let grad = self.entries[slot].1.grad_mut();
            for (dst, &src) in grad.iter_mut().zip(g) {
                *dst = *dst + src;
            }
        }
    }

    /// Errors if any gradient buffer holds a NaN or infinity, naming the
    /// offending parameter.
    pub fn ensure_grads_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            if let Some(g) = t.grad() {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
            }
        }
        Ok(())
    }
}

/// Flat per-parameter gradient storage, used to merge gradients computed on
/// separate tapes (one per example) in a fixed order.
#[derive(Clone, Debug)]
pub struct GradBuffer<S: Scalar> {
    per_param: Vec<Vec<S>>,
}

impl<S: Scalar> GradBuffer<S> {
    pub fn zeros_like(params: &Parameters<S>) -> Self {
        GradBuffer {
            per_param: params.iter().map(|(_, t)| vec![S::zero(); t.len()]).collect(),
        }
    }

    pub fn accumulate_from(&mut self, tape: &Tape<S>) {
        for (slot, g) in tape.param_grads() {
            for (dst, &src) in self.per_param[slot].iter_mut().zip(g) {
                *dst = *dst + src;
            }
        }
    }

    pub fn merge(&mut self, other: &GradBuffer<S>) {
        for (dst, src) in self.per_param.iter_mut().zip(&other.per_param) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }

    /// Moves the accumulated gradients into the parameters' grad buffers.
    pub fn store_into(&self, params: &mut Parameters<S>) {
        for (i, (_, t)) in params.entries.iter_mut().enumerate() {
            let grad = t.grad_mut();
            for (dst, &src) in grad.iter_mut().zip(&self.per_param[i]) {
                *dst = *dst + src;
            }
        }
    }
}
