//! Insertion-based sequence generation for document-level translation.
//!
//! The library trains a transformer to rebuild sentence-aligned target
//! documents by repeatedly inserting tokens into a partial hypothesis (a
//! "canvas").  Decoding starts from one sentence anchor per source sentence
//! and fills every slot in parallel, so a document of n tokens completes in
//! roughly log2(n) passes instead of n.
//!
//! Modules:
//!
//! * [`numerics`]: dense tensors, reverse-mode autodiff, gradient checking.
//! * [`canvas`]: partial hypotheses, slot targets, insertion application.
//! * [`data`]: synthetic corpora, vocabularies, batching.
//! * [`model`]: the encoder-decoder with sentence-positional embeddings.
//! * [`optim`]: SM3 with momentum and quadratic warmup.
//! * [`train`]: batch loss, gradient accumulation, the training loop.
//! * [`decode`]: parallel greedy decoding with traces.
//! * [`eval`]: BLEU, sentence alignment reports, ablation comparison.
//!
//! Everything is deterministic given a seed: corpora, initialization,
//! batching, canvas sampling and decoding all flow from explicit RNG streams,
//! and tensor reductions run in a fixed order whether or not the `parallel`
//! feature fans work out across threads.

pub mod canvas;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
