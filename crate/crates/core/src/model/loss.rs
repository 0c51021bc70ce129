use rand::Rng;

use crate::canvas::{sample_intermediate_canvas, slot_targets, Canvas, SlotTargets, Token};
use crate::data::Example;
use crate::error::Result;
use crate::model::net::{Forward, Network};
use crate::numerics::{cast, Parameters, Scalar, Tensor, Var};

/// How the tokens missing from a slot share that slot's probability mass.
/// `BinaryTree` concentrates mass near the span center, which rewards the
/// balanced insertion order that finishes in a logarithmic number of rounds;
/// `Uniform` treats every missing token equally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpanWeighting {
    BinaryTree { tau: f64 },
    Uniform,
}

impl Default for SpanWeighting {
    fn default() -> Self {
        SpanWeighting::BinaryTree { tau: 1.0 }
    }
}

impl SpanWeighting {
    fn span_weights(&self, len: usize) -> Vec<f64> {
        match *self {
            SpanWeighting::BinaryTree { tau } => crate::canvas::binary_tree_weights(len, tau),
            SpanWeighting::Uniform => vec![1.0 / len as f64; len],
        }
    }
}

/// One training example after target corruption: the sampled partial canvas
/// plus the per-slot class weights its loss contracts against.
#[derive(Debug, Clone)]
pub struct PreparedExample<S: Scalar> {
    pub source_tokens: Vec<Token>,
    pub source_sentence_ids: Vec<u32>,
    pub canvas: Canvas,
    /// Shape `[num_slots, vocab_size + 1]`; rows sum to `1 / num_slots` so
    /// the example loss is a mean over slots.
    pub weights: Tensor<S>,
}

/// Builds the weight matrix for a corrupted canvas: empty slots put all mass
/// on the completion class, non-empty slots spread theirs over the missing
/// tokens (summed per class when a token repeats within the span).
pub fn slot_weight_rows<S: Scalar>(
    targets: &SlotTargets,
    vocab_size: usize,
    weighting: SpanWeighting,
) -> Result<Tensor<S>> {
    let num_slots = targets.num_slots();
    let classes = vocab_size + 1;
    let inv_slots = 1.0 / num_slots as f64;
    let mut data = vec![S::zero(); num_slots * classes];
    for slot in 0..num_slots {
        let span = targets.span(slot);
        if span.is_empty() {
            data[slot * classes + vocab_size] = cast(inv_slots);
        } else {
            let span_weights = weighting.span_weights(span.len());
            for (entry, w) in span.iter().zip(span_weights) {
                let cell = slot * classes + entry.token as usize;
                data[cell] = data[cell] + cast::<S>(w * inv_slots);
            }
        }
    }
    Tensor::new(vec![num_slots, classes], data)
}

/// Samples a uniformly random intermediate canvas of the example's target and
/// derives its slot weights. The caller owns the generator, so the corruption
/// sequence is reproducible and independent of how examples are later
/// distributed across worker threads.
pub fn prepare_example<S: Scalar, R: Rng>(
    example: &Example,
    vocab_size: usize,
    weighting: SpanWeighting,
    rng: &mut R,
) -> Result<PreparedExample<S>> {
    let (canvas, kept) = sample_intermediate_canvas(&example.target, rng);
    let targets = slot_targets(&example.target, &kept)?;
    let weights = slot_weight_rows(&targets, vocab_size, weighting)?;
    Ok(PreparedExample {
        source_tokens: example.source_tokens.clone(),
        source_sentence_ids: example.source_sids.clone(),
        canvas,
        weights,
    })
}

/// Runs the full forward pass and contracts the log-probabilities against the
/// prepared weights: `loss = -sum(W ⊙ log_softmax(logits))`, a mean over
/// slots of weighted cross-entropies. Returns the live forward state so the
/// caller can read the value and run the backward pass.
pub fn example_loss<'a, S: Scalar>(
    net: &Network,
    params: &'a Parameters<S>,
    prepared: &PreparedExample<S>,
) -> Result<(Forward<'a, S>, Var)> {
    let mut fwd = Forward::new(params);
    let logits = net.forward_slots(
        &mut fwd,
        &prepared.source_tokens,
        &prepared.source_sentence_ids,
        &prepared.canvas,
    )?;
    let log_probs = fwd.tape.log_softmax(logits)?;
    let weights = fwd.tape.constant(prepared.weights.clone());
    let weighted = fwd.tape.mul(log_probs, weights)?;
    let total = fwd.tape.sum_all(weighted);
    let loss = fwd.tape.scale(total, cast::<S>(-1.0));
    Ok((fwd, loss))
}
