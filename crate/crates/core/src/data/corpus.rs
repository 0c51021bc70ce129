//! Deterministic synthetic document generation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::canvas::{Canvas, Token, FIRST_CONTENT};
use crate::error::{Error, Result};

use super::DocumentPair;

/// How target sentences are derived from source sentences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    /// Each token is replaced through a fixed bijection.
    Substitution,
    /// Substitution followed by reversing each sentence's token order.
    SubstitutionReversed,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Substitution => "substitution",
            TransformKind::SubstitutionReversed => "substitution_reversed",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "substitution" => Ok(TransformKind::Substitution),
            "substitution_reversed" => Ok(TransformKind::SubstitutionReversed),
            other => Err(Error::Config(format!("unknown transform {other:?}"))),
        }
    }
}

/// Shape of the synthetic task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskConfig {
    /// Number of content token types.
    pub content_vocab: usize,
    /// Inclusive range of sentences per document.
    pub sentences_per_doc: (usize, usize),
    /// Inclusive range of tokens per sentence.
    pub sentence_len: (usize, usize),
    /// Probability that a token repeats one drawn in an earlier sentence of
    /// the same document instead of being fresh.
    pub ambiguity: f64,
    pub transform: TransformKind,
    /// Master seed; the substitution table and every split derive from it.
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            content_vocab: 64,
            sentences_per_doc: (3, 6),
            sentence_len: (4, 8),
            ambiguity: 0.0,
            transform: TransformKind::Substitution,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let (s_min, s_max) = self.sentences_per_doc;
        let (l_min, l_max) = self.sentence_len;
        if s_min == 0 || s_min > s_max {
            return Err(Error::Config(format!(
                "sentences_per_doc range ({s_min}, {s_max}) is invalid"
            )));
        }
        if l_min == 0 || l_min > l_max {
            return Err(Error::Config(format!(
                "sentence_len range ({l_min}, {l_max}) is invalid"
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Config(format!(
                "ambiguity {} is not a probability",
                self.ambiguity
            )));
        }
        let worst_case = s_max * l_max;
        if self.content_vocab < worst_case {
            return Err(Error::Config(format!(
                "content vocabulary of {} cannot fill {s_max} sentences of up to \
                 {l_max} fresh tokens; need at least {worst_case}",
                self.content_vocab
            )));
        }
        Ok(())
    }
}

/// RNG stream ids carved out of the master seed.
const STREAM_SIGMA: u64 = 0;

/// A corpus split with its own RNG stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// A validated task: the config plus its substitution table.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    config: TaskConfig,
    /// `sigma[i]` is the target content index of source content index `i`.
    sigma: Vec<u32>,
}

impl SyntheticTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_SIGMA);
        let mut sigma: Vec<u32> = (0..config.content_vocab as u32).collect();
        sigma.shuffle(&mut rng);
        Ok(SyntheticTask { config, sigma })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    /// The content-index bijection, for tests.
    pub fn sigma(&self) -> &[u32] {
        &self.sigma
    }

    /// Target sentence for a source sentence.
    pub fn transform_sentence(&self, source: &[Token]) -> Vec<Token> {
        let mut out: Vec<Token> = source
            .iter()
            .map(|&t| self.sigma[(t - FIRST_CONTENT) as usize] + FIRST_CONTENT)
            .collect();
        if self.config.transform == TransformKind::SubstitutionReversed {
            out.reverse();
        }
        out
    }

    /// Generates `num_docs` documents for a split, with ids starting at
    /// `first_id`.  The same seed, split and count always produce the same
    /// documents, and each split draws from its own RNG stream.
    pub fn generate_split(&self, split: Split, num_docs: usize, first_id: u64) -> Vec<DocumentPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(split.stream());
        (0..num_docs)
            .map(|i| self.generate_doc(first_id + i as u64, &mut rng))
            .collect()
    }

    fn generate_doc(&self, id: u64, rng: &mut ChaCha8Rng) -> DocumentPair {
        let (s_min, s_max) = self.config.sentences_per_doc;
        let (l_min, l_max) = self.config.sentence_len;
        let num_sentences = rng.gen_range(s_min..=s_max);

        let mut fresh: Vec<Token> = (0..self.config.content_vocab as Token)
            .map(|i| i + FIRST_CONTENT)
            .collect();
        fresh.shuffle(rng);
        let mut next_fresh = 0;

        let mut earlier: Vec<Token> = Vec::new();
        let mut source: Vec<Vec<Token>> = Vec::with_capacity(num_sentences);
        for _ in 0..num_sentences {
            let len = rng.gen_range(l_min..=l_max);
            let mut sentence = Vec::with_capacity(len);
            for _ in 0..len {
                let reuse = !earlier.is_empty() && rng.gen::<f64>() < self.config.ambiguity;
                if reuse {
                    sentence.push(earlier[rng.gen_range(0..earlier.len())]);
                } else {
                    sentence.push(fresh[next_fresh]);
                    next_fresh += 1;
                }
            }
            source.push(sentence);
            earlier.extend_from_slice(source.last().unwrap());
        }

        let target = source.iter().map(|s| self.transform_sentence(s)).collect();
        DocumentPair { id, source, target }
    }
}

/// One training or evaluation example: a window of consecutive sentences
/// with sentence positions rebased to zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub doc_id: u64,
    /// Flattened source tokens; the source has no separators.
    pub source_tokens: Vec<Token>,
    /// Sentence position of every source token, starting at zero.
    pub source_sids: Vec<u32>,
    /// Full target canvas, one anchor per sentence.
    pub target: Canvas,
}

impl Example {
    pub fn num_sentences(&self) -> usize {
        self.target.num_sentences()
    }
}

/// Builds the example for sentences `start..end` of a document.
pub fn example_from_window(doc: &DocumentPair, start: usize, end: usize) -> Result<Example> {
    if start >= end || end > doc.num_sentences() {
        return Err(Error::Contract(format!(
            "sentence window {start}..{end} is invalid for a document with {} sentences",
            doc.num_sentences()
        )));
    }
    let mut source_tokens = Vec::new();
    let mut source_sids = Vec::new();
    for (pos, sentence) in doc.source[start..end].iter().enumerate() {
        source_tokens.extend_from_slice(sentence);
        source_sids.extend(std::iter::repeat(pos as u32).take(sentence.len()));
    }
    let target = Canvas::from_sentences(&doc.target[start..end])?;
    Ok(Example {
        doc_id: doc.id,
        source_tokens,
        source_sids,
        target,
    })
}

/// Every single-sentence example of a corpus, in document order.
pub fn sentence_examples(docs: &[DocumentPair]) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for doc in docs {
        for s in 0..doc.num_sentences() {
            out.push(example_from_window(doc, s, s + 1)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(ambiguity: f64) -> SyntheticTask {
        SyntheticTask::new(TaskConfig {
            ambiguity,
            ..TaskConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn generation_is_deterministic_per_split() {
        let t = task(0.3);
        let a = t.generate_split(Split::Train, 5, 0);
        let b = t.generate_split(Split::Train, 5, 0);
        assert_eq!(a, b);
        let c = t.generate_split(Split::Valid, 5, 100);
        assert_ne!(a[0].source, c[0].source, "splits draw different documents");
        assert_eq!(c[0].id, 100);
        assert_eq!(c[4].id, 104);
    }

    #[test]
    fn different_seeds_differ() {
        let a = SyntheticTask::new(TaskConfig::default()).unwrap();
        let b = SyntheticTask::new(TaskConfig {
            seed: 1,
            ..TaskConfig::default()
        })
        .unwrap();
        assert_ne!(a.sigma(), b.sigma());
        assert_ne!(
            a.generate_split(Split::Train, 3, 0),
            b.generate_split(Split::Train, 3, 0)
        );
    }

    #[test]
    fn sigma_is_a_bijection_and_applied_per_token() {
        let t = task(0.0);
        let mut seen = vec![false; t.config().content_vocab];
        for &v in t.sigma() {
            assert!(!seen[v as usize], "sigma repeats {v}");
            seen[v as usize] = true;
        }
        for doc in t.generate_split(Split::Train, 4, 0) {
            assert_eq!(doc.source.len(), doc.target.len());
            for (src, tgt) in doc.source.iter().zip(&doc.target) {
                let want: Vec<Token> = src
                    .iter()
                    .map(|&tok| t.sigma()[(tok - FIRST_CONTENT) as usize] + FIRST_CONTENT)
                    .collect();
                assert_eq!(tgt, &want);
            }
        }
    }

    #[test]
    fn reversed_transform_reverses_each_sentence() {
        let t = SyntheticTask::new(TaskConfig {
            transform: TransformKind::SubstitutionReversed,
            ..TaskConfig::default()
        })
        .unwrap();
        let doc = &t.generate_split(Split::Train, 1, 0)[0];
        for (src, tgt) in doc.source.iter().zip(&doc.target) {
            let mut mapped: Vec<Token> = src
                .iter()
                .map(|&tok| t.sigma()[(tok - FIRST_CONTENT) as usize] + FIRST_CONTENT)
                .collect();
            mapped.reverse();
            assert_eq!(tgt, &mapped);
        }
    }

    #[test]
    fn zero_ambiguity_keeps_document_tokens_distinct() {
        let t = task(0.0);
        for doc in t.generate_split(Split::Train, 10, 0) {
            let all: Vec<Token> = doc.source.iter().flatten().copied().collect();
            let mut dedup = all.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), all.len(), "doc {} repeats a token", doc.id);
        }
    }

    #[test]
    fn full_ambiguity_reuses_earlier_sentences_only() {
        let t = task(1.0);
        for doc in t.generate_split(Split::Train, 10, 0) {
            let mut earlier: Vec<Token> = Vec::new();
            for (s, sentence) in doc.source.iter().enumerate() {
                if s > 0 {
                    for &tok in sentence {
                        assert!(
                            earlier.contains(&tok),
                            "doc {} sentence {s} token {tok} is not a reuse",
                            doc.id
                        );
                    }
                }
                earlier.extend_from_slice(sentence);
            }
        }
    }

    #[test]
    fn sentence_counts_and_lengths_respect_ranges() {
        let t = task(0.2);
        let mut seen_sentence_counts = std::collections::HashSet::new();
        for doc in t.generate_split(Split::Train, 64, 0) {
            let (s_min, s_max) = t.config().sentences_per_doc;
            assert!((s_min..=s_max).contains(&doc.num_sentences()));
            seen_sentence_counts.insert(doc.num_sentences());
            for sentence in &doc.source {
                let (l_min, l_max) = t.config().sentence_len;
                assert!((l_min..=l_max).contains(&sentence.len()));
            }
        }
        assert!(seen_sentence_counts.len() > 1, "lengths actually vary");
    }

    #[test]
    fn config_validation_catches_small_vocab() {
        let err = SyntheticTask::new(TaskConfig {
            content_vocab: 40,
            ..TaskConfig::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("48"), "{err}");
        assert!(TaskConfig {
            sentence_len: (3, 2),
            ..TaskConfig::default()
        }
        .validate()
        .is_err());
        assert!(TaskConfig {
            ambiguity: 1.5,
            ..TaskConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn windows_rebase_sentence_positions() {
        let t = task(0.0);
        let doc = &t.generate_split(Split::Train, 1, 0)[0];
        let full = example_from_window(doc, 0, doc.num_sentences()).unwrap();
        assert_eq!(full.source_sids[0], 0);
        assert_eq!(
            full.target.num_sentences(),
            doc.num_sentences(),
            "target canvas covers the whole window"
        );

        let tail = example_from_window(doc, 1, 3).unwrap();
        assert_eq!(tail.source_sids[0], 0, "positions rebase to zero");
        assert_eq!(tail.num_sentences(), 2);
        assert_eq!(tail.source_tokens.len(), doc.source[1].len() + doc.source[2].len());

        assert!(example_from_window(doc, 2, 2).is_err());
        assert!(example_from_window(doc, 0, 99).is_err());
    }

    #[test]
    fn sentence_examples_cover_every_sentence() {
        let t = task(0.0);
        let docs = t.generate_split(Split::Train, 4, 0);
        let singles = sentence_examples(&docs).unwrap();
        let want: usize = docs.iter().map(|d| d.num_sentences()).sum();
        assert_eq!(singles.len(), want);
        assert!(singles.iter().all(|e| e.num_sentences() == 1));
    }
}
