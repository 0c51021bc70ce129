//! Sub-document sampling and the training batch stream.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::corpus::{example_from_window, Example};
use super::DocumentPair;

/// Each document contributes `ceil(sentences / 10)` sub-document draws per
/// epoch.
pub const SUBDOC_DRAWS_DIVISOR: usize = 10;

/// Draws a contiguous sentence window from a document.
///
/// A token budget is sampled uniformly from `1..=l_max` (measured against
/// the target side including anchors), a start sentence is sampled
/// uniformly, and sentences are appended while they fit.  The start sentence
/// is always included even when it alone overflows the budget.
pub fn sample_subdocument<R: Rng>(
    doc: &DocumentPair,
    l_max: usize,
    rng: &mut R,
) -> Result<Example> {
    if l_max == 0 {
        return Err(Error::Config("l_max must be positive".into()));
    }
    if doc.num_sentences() == 0 {
        return Err(Error::Contract(format!("document {} is empty", doc.id)));
    }
    let budget = rng.gen_range(1..=l_max);
    let start = rng.gen_range(0..doc.num_sentences());
    let mut end = start + 1;
    let mut used = doc.target[start].len() + 1;
    while end < doc.num_sentences() {
        let next = doc.target[end].len() + 1;
        if used + next > budget {
            break;
        }
        used += next;
        end += 1;
    }
    example_from_window(doc, start, end)
}

/// One batch of examples.  The first half are sub-document draws, the second
/// half single sentences, in the fixed order they were drawn; downstream
/// reductions rely on that order for bit-reproducibility.
pub type Batch = Vec<Example>;

/// Endless deterministic stream of mixed batches.
///
/// Every epoch enqueues `ceil(S / 10)` sub-document draws per document,
/// shuffled; single-sentence examples are drawn with replacement so each
/// batch pairs the two kinds one to one.
pub struct BatchStream<'a> {
    docs: &'a [DocumentPair],
    sentence_pool: Vec<(usize, usize)>,
    queue: VecDeque<usize>,
    batch_size: usize,
    l_max: usize,
    rng: ChaCha8Rng,
    epochs_completed: u64,
}

const STREAM_BATCHES: u64 = 4;

impl<'a> BatchStream<'a> {
    pub fn new(docs: &'a [DocumentPair], batch_size: usize, l_max: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be even to mix documents and sentences 1:1"
            )));
        }
        if docs.is_empty() {
            return Err(Error::Config("cannot batch an empty corpus".into()));
        }
        if l_max == 0 {
            return Err(Error::Config("l_max must be positive".into()));
        }
        let mut sentence_pool = Vec::new();
        for (d, doc) in docs.iter().enumerate() {
            for s in 0..doc.num_sentences() {
                sentence_pool.push((d, s));
            }
        }
        if sentence_pool.is_empty() {
            return Err(Error::Config("corpus has no sentences".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_BATCHES);
        let mut stream = BatchStream {
            docs,
            sentence_pool,
            queue: VecDeque::new(),
            batch_size,
            l_max,
            rng,
            epochs_completed: 0,
        };
        stream.refill();
        Ok(stream)
    }

    /// Sub-document draws each epoch contributes.
    pub fn draws_per_epoch(&self) -> usize {
        self.docs
            .iter()
            .map(|d| d.num_sentences().div_ceil(SUBDOC_DRAWS_DIVISOR))
            .sum()
    }

    /// Completed refills of the sub-document queue.
    pub fn epochs_completed(&self) -> u64 {
        self.epochs_completed
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = Vec::with_capacity(self.draws_per_epoch());
        for (d, doc) in self.docs.iter().enumerate() {
            let draws = doc.num_sentences().div_ceil(SUBDOC_DRAWS_DIVISOR);
            order.extend(std::iter::repeat(d).take(draws));
        }
        order.shuffle(&mut self.rng);
        self.queue.extend(order);
    }

    fn next_doc(&mut self) -> usize {
        if let Some(d) = self.queue.pop_front() {
            return d;
        }
        self.epochs_completed += 1;
        self.refill();
        self.queue.pop_front().expect("refilled queue is non-empty")
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let half = self.batch_size / 2;
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..half {
            let doc = self.next_doc();
            batch.push(sample_subdocument(&self.docs[doc], self.l_max, &mut self.rng)?);
        }
        for _ in 0..half {
            let (d, s) = self.sentence_pool[self.rng.gen_range(0..self.sentence_pool.len())];
            batch.push(example_from_window(&self.docs[d], s, s + 1)?);
        }
        Ok(batch)
    }
}
