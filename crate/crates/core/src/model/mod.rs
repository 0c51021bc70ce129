//! Insertion transformer over sentence-anchored canvases.
//!
//! The network is a standard pre-norm encoder/decoder transformer with one
//! twist: both sides carry an optional learned sentence-position embedding in
//! addition to the usual sinusoidal token positions. The source is a flat
//! token sequence (no separators) whose sentence ids come from the data; the
//! target is a [`crate::canvas::Canvas`] whose sentence ids come from its
//! anchor structure. Turning `use_sentence_positions` off recovers the plain
//! insertion-transformer baseline while leaving the parameter layout (and the
//! random init stream) untouched, so ablations share bit-identical weights
//! everywhere except the tables the flag disables.
//!
//! Decoding inserts tokens, so the decoder self-attention is deliberately
//! unmasked: every canvas token may look at every other. The output head
//! scores the `n + 1` slots of an `n`-token canvas by pairing adjacent hidden
//! states (with learned boundary vectors at the two ends) and projecting each
//! pair to `vocab_size + 1` classes, the final class meaning "this slot is
//! complete".

mod loss;
mod net;

pub use loss::{
    example_loss, prepare_example, slot_weight_rows, PreparedExample, SpanWeighting,
};
pub use net::{Forward, Network};

use crate::error::{Error, Result};

/// Architecture hyperparameters. `Default` is the desk-scale configuration
/// used by the end-to-end tests: small enough to train in minutes on one
/// core, large enough to solve the synthetic document tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Total vocabulary size including the reserved ids. Class indices of the
    /// slot head are token ids `0..vocab_size` plus one extra completion
    /// class at index `vocab_size`.
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    /// Encoder depth and decoder depth (they are kept equal).
    pub num_layers: usize,
    /// Capacity of the learned sentence-position tables.
    pub max_sentences: usize,
    /// When false the sentence tables are still allocated and initialized but
    /// never enter the forward pass.
    pub use_sentence_positions: bool,
    /// Layer-norm stabilizer.
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 67,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            num_layers: 2,
            max_sentences: 64,
            use_sentence_positions: true,
            eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for content tokens",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_ff == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "d_model, num_heads, d_ff, num_layers must all be positive".into(),
            ));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.max_sentences == 0 {
            return Err(Error::Config("max_sentences must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// Number of classes produced by the slot head.
    pub fn num_classes(&self) -> usize {
        self.vocab_size + 1
    }

    /// Class index of the "slot is complete" outcome.
    pub fn end_of_slot_class(&self) -> usize {
        self.vocab_size
    }
}
