//! Synthetic corpora, vocabularies, examples and batching.
//!
//! The task family is deliberate: each document pairs source sentences with
//! target sentences produced by a fixed bijective token substitution
//! (optionally with per-sentence reversal), so a model that places every
//! token in the right sentence can score perfectly, and every run is
//! reproducible from a seed.  An ambiguity rate controls how often a token
//! is reused from an earlier sentence of the same document; reused tokens
//! are exactly the ones whose sentence attribution cannot be resolved by
//! token identity alone.

mod batch;
mod corpus;
mod io;
mod vocab;

pub use batch::{sample_subdocument, Batch, BatchStream, SUBDOC_DRAWS_DIVISOR};
pub use corpus::{
    example_from_window, sentence_examples, Example, Split, SyntheticTask, TaskConfig,
    TransformKind,
};
pub use io::{read_documents, read_vocab, write_documents, write_vocab};
pub use vocab::Vocab;

/// A sentence-aligned source and target document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocumentPair {
    pub id: u64,
    /// Source sentences, content tokens only.
    pub source: Vec<Vec<crate::canvas::Token>>,
    /// Target sentences, content tokens only; anchors are added when the
    /// target is turned into a canvas.
    pub target: Vec<Vec<crate::canvas::Token>>,
}

impl DocumentPair {
    pub fn num_sentences(&self) -> usize {
        self.source.len()
    }

    /// Total target length as the decoder sees it: content plus one anchor
    /// per sentence.
    pub fn target_len_with_anchors(&self) -> usize {
        self.target.iter().map(|s| s.len() + 1).sum()
    }
}
