//! Partial hypotheses and the insertion calculus over them.
//!
//! A [`Canvas`] is a subsequence of some target document: tokens plus the
//! sentence id of each token.  Between and around its `n` tokens lie `n + 1`
//! slots; generation proceeds by inserting tokens into slots until every
//! slot reports completion.
//!
//! Targets put a sentence anchor (`⟨s⟩`) in front of every sentence, and the
//! source side has no separators at all; the anchors are what the decoder is
//! seeded with, one per source sentence.  Anchors are never inserted and
//! never removed: canvases sampled during training always keep them, and
//! decoding masks them out of every prediction.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Token id.  Ids below [`FIRST_CONTENT`] are reserved.
pub type Token = u32;

/// Padding for batched tensors; never appears in a canvas.
pub const PAD: Token = 0;
/// Sentence anchor `⟨s⟩`; begins every sentence on the target side.
pub const ANCHOR: Token = 1;
/// Reserved id rendered as `⟨eos⟩` in vocabularies.  The model predicts
/// "this slot is finished" as an extra class appended after the vocabulary,
/// and this id gives that class a stable spot in token tables.
pub const END_OF_SLOT: Token = 2;
/// First id available to corpus content.
pub const FIRST_CONTENT: Token = 3;

/// A token sequence with sentence ids, non-decreasing, where every anchor
/// starts the next sentence and position 0 is an anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canvas {
    tokens: Vec<Token>,
    sentence_ids: Vec<u32>,
}

impl Canvas {
    pub fn new(tokens: Vec<Token>, sentence_ids: Vec<u32>) -> Result<Self> {
        if tokens.len() != sentence_ids.len() {
            return Err(Error::Contract(format!(
                "canvas has {} tokens but {} sentence ids",
                tokens.len(),
                sentence_ids.len()
            )));
        }
        for (i, (&tok, &sid)) in tokens.iter().zip(&sentence_ids).enumerate() {
            if tok == PAD || tok == END_OF_SLOT {
                return Err(Error::Contract(format!(
                    "reserved token {tok} at canvas position {i}"
                )));
            }
            let expected = if i == 0 {
                if tok != ANCHOR {
                    return Err(Error::Contract("canvas must start with an anchor".into()));
                }
                0
            } else if tok == ANCHOR {
                sentence_ids[i - 1] + 1
            } else {
                sentence_ids[i - 1]
            };
            if sid != expected {
                return Err(Error::Contract(format!(
                    "sentence id {sid} at position {i} (token {tok}), expected {expected}"
                )));
            }
        }
        Ok(Canvas {
            tokens,
            sentence_ids,
        })
    }

    /// Full target canvas: each sentence becomes an anchor followed by its
    /// tokens.
    pub fn from_sentences(sentences: &[Vec<Token>]) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut sentence_ids = Vec::new();
        for (s, sentence) in sentences.iter().enumerate() {
            tokens.push(ANCHOR);
            sentence_ids.push(s as u32);
            for &tok in sentence {
                if tok < FIRST_CONTENT {
                    return Err(Error::Contract(format!(
                        "reserved token {tok} inside sentence {s}"
                    )));
                }
                tokens.push(tok);
                sentence_ids.push(s as u32);
            }
        }
        if tokens.is_empty() {
            return Err(Error::Contract("a canvas needs at least one sentence".into()));
        }
        Ok(Canvas {
            tokens,
            sentence_ids,
        })
    }

    /// The decode start state: one anchor per sentence, nothing else.
    pub fn anchors_only(num_sentences: usize) -> Result<Self> {
        if num_sentences == 0 {
            return Err(Error::Contract("a canvas needs at least one sentence".into()));
        }
        Ok(Canvas {
            tokens: vec![ANCHOR; num_sentences],
            sentence_ids: (0..num_sentences as u32).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn sentence_ids(&self) -> &[u32] {
        &self.sentence_ids
    }

    pub fn num_slots(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn num_sentences(&self) -> usize {
        self.sentence_ids.last().map_or(0, |&s| s as usize + 1)
    }

    /// Indices of the anchor tokens.
    pub fn anchor_positions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == ANCHOR).then_some(i))
            .collect()
    }

    /// Content tokens of each sentence, anchors stripped.
    pub fn to_sentences(&self) -> Vec<Vec<Token>> {
        let mut out: Vec<Vec<Token>> = vec![Vec::new(); self.num_sentences()];
        for (&tok, &sid) in self.tokens.iter().zip(&self.sentence_ids) {
            if tok != ANCHOR {
                out[sid as usize].push(tok);
            }
        }
        out
    }
}

/// Draws a training canvas from a full target: every anchor is kept, and a
/// uniformly sized, uniformly chosen subset of the content tokens is kept.
///
/// Returns the canvas together with the kept indices into `full`, sorted.
pub fn sample_intermediate_canvas<R: Rng>(full: &Canvas, rng: &mut R) -> (Canvas, Vec<usize>) {
    let content: Vec<usize> = (0..full.len())
        .filter(|&i| full.tokens[i] != ANCHOR)
        .collect();
    let k = rng.gen_range(0..=content.len());
    let mut kept: Vec<usize> = full.anchor_positions();
    kept.extend(sample(rng, content.len(), k).iter().map(|j| content[j]));
    kept.sort_unstable();
    let canvas = Canvas {
        tokens: kept.iter().map(|&i| full.tokens[i]).collect(),
        sentence_ids: kept.iter().map(|&i| full.sentence_ids[i]).collect(),
    };
    (canvas, kept)
}

/// A token missing from a canvas, with the sentence it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotEntry {
    pub token: Token,
    pub sentence_id: u32,
}

/// The tokens each slot of a canvas still owes, in target order.
///
/// Spans are stored flat: `offsets` has one entry per slot plus a trailing
/// total, and `span(i)` is the slice between consecutive offsets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SlotTargets {
    entries: Vec<SlotEntry>,
    offsets: Vec<usize>,
}

impl SlotTargets {
    pub fn num_slots(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn span(&self, slot: usize) -> &[SlotEntry] {
        &self.entries[self.offsets[slot]..self.offsets[slot + 1]]
    }

    pub fn spans(&self) -> impl Iterator<Item = &[SlotEntry]> + '_ {
        (0..self.num_slots()).map(move |i| self.span(i))
    }

    /// True when no slot owes anything: the canvas equals the target.
    pub fn is_complete(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_missing(&self) -> usize {
        self.entries.len()
    }

    /// Length of the longest span.
    pub fn max_span(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }
}

/// Computes which target tokens each slot of the kept subsequence owes.
///
/// `kept` are strictly increasing indices into `full` and must cover every
/// anchor.  Slot `i` of the induced canvas owes exactly the tokens of `full`
/// lying strictly between kept index `i - 1` and kept index `i`.
pub fn slot_targets(full: &Canvas, kept: &[usize]) -> Result<SlotTargets> {
    let mut out = SlotTargets::default();
    slot_targets_into(full, kept, &mut out)?;
    Ok(out)
}

/// Allocation-reusing form of [`slot_targets`] for hot loops.
pub fn slot_targets_into(full: &Canvas, kept: &[usize], out: &mut SlotTargets) -> Result<()> {
    out.entries.clear();
    out.offsets.clear();
    let mut prev = None;
    for &i in kept {
        if i >= full.len() {
            return Err(Error::Contract(format!(
                "kept index {i} out of range for canvas of length {}",
                full.len()
            )));
        }
        if prev.is_some_and(|p| p >= i) {
            return Err(Error::Contract("kept indices must be strictly increasing".into()));
        }
        prev = Some(i);
    }

    let mut next_kept = 0;
    out.offsets.push(0);
    for (i, (&tok, &sid)) in full.tokens.iter().zip(&full.sentence_ids).enumerate() {
        if next_kept < kept.len() && kept[next_kept] == i {
            next_kept += 1;
            out.offsets.push(out.entries.len());
        } else {
            if tok == ANCHOR {
                return Err(Error::Contract(format!(
                    "kept indices drop the anchor at position {i}"
                )));
            }
            out.entries.push(SlotEntry {
                token: tok,
                sentence_id: sid,
            });
        }
    }
    out.offsets.push(out.entries.len());
    Ok(())
}

/// One insertion: a token going into a slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Insertion {
    pub slot: usize,
    pub token: Token,
}

/// Applies one parallel round of insertions, at most one per slot, all slots
/// indexed against the canvas as it was before the round.
///
/// Inserted tokens take the sentence id of their left neighbor, which is why
/// slot 0 is illegal: there is nothing left of it, and position 0 is an
/// anchor that nothing may precede.
pub fn apply_insertions(canvas: &Canvas, insertions: &[Insertion]) -> Result<Canvas> {
    let slots = canvas.num_slots();
    let mut by_slot: Vec<Option<Token>> = vec![None; slots];
    for ins in insertions {
        if ins.slot >= slots {
            return Err(Error::Contract(format!(
                "slot {} out of range for a canvas with {slots} slots",
                ins.slot
            )));
        }
        if ins.slot == 0 {
            return Err(Error::Contract(
                "slot 0 precedes the first anchor; insertions there are illegal".into(),
            ));
        }
        if ins.token < FIRST_CONTENT {
            return Err(Error::Contract(format!(
                "token {} is reserved and cannot be inserted",
                ins.token
            )));
        }
        if by_slot[ins.slot].replace(ins.token).is_some() {
            return Err(Error::Contract(format!(
                "two insertions into slot {} in one round",
                ins.slot
            )));
        }
    }

    let mut tokens = Vec::with_capacity(canvas.len() + insertions.len());
    let mut sentence_ids = Vec::with_capacity(canvas.len() + insertions.len());
    for i in 0..canvas.len() {
        tokens.push(canvas.tokens[i]);
        sentence_ids.push(canvas.sentence_ids[i]);
        if let Some(tok) = by_slot[i + 1] {
            tokens.push(tok);
            sentence_ids.push(canvas.sentence_ids[i]);
        }
    }
    Ok(Canvas {
        tokens,
        sentence_ids,
    })
}

/// Soft targets over a span's positions that favor its center, so training
/// prefers balanced binary tree insertion orders.
///
/// Weight `i` is proportional to `exp(-|i - (len-1)/2| / tau)`; the result
/// sums to one.  Smaller `tau` concentrates faster on the center.
pub fn binary_tree_weights(len: usize, tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "tau must be positive");
    if len == 0 {
        return Vec::new();
    }
    let center = (len as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - center).abs()) / tau).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Index of the center token of a span, ties resolved leftward.
pub fn span_center(len: usize) -> usize {
    debug_assert!(len > 0);
    (len - 1) / 2
}

/// One step of the ideal policy: insert the center token of every non-empty
/// span.  `kept` indexes the current canvas's tokens within the full target
/// and is updated to include the insertions.
pub fn oracle_policy_step_indexed(
    targets: &SlotTargets,
    kept: &mut Vec<usize>,
) -> Result<Vec<Insertion>> {
    if targets.num_slots() != kept.len() + 1 {
        return Err(Error::Contract(format!(
            "{} slots do not match {} kept tokens",
            targets.num_slots(),
            kept.len()
        )));
    }
    let mut insertions = Vec::new();
    let mut new_kept = Vec::with_capacity(kept.len() + targets.num_slots());
    for slot in 0..targets.num_slots() {
        let span = targets.span(slot);
        if !span.is_empty() {
            let pick = span_center(span.len());
            insertions.push(Insertion {
                slot,
                token: span[pick].token,
            });
            // The span occupies full indices between the neighboring kept
            // entries; its start is one past the left neighbor.
            let left = if slot == 0 { None } else { Some(kept[slot - 1]) };
            let span_start = left.map_or(0, |l| l + 1);
            new_kept.push(span_start + pick);
        }
        if slot < kept.len() {
            new_kept.push(kept[slot]);
        }
    }
    new_kept.sort_unstable();
    *kept = new_kept;
    Ok(insertions)
}

/// One step of the ideal policy against a free-standing canvas: the canvas
/// is matched into `full` as its leftmost embedding, then every non-empty
/// span contributes its center token.
pub fn oracle_policy_step(full: &Canvas, current: &Canvas) -> Result<Vec<Insertion>> {
    let mut kept = leftmost_embedding(full, current)?;
    let targets = slot_targets(full, &kept)?;
    oracle_policy_step_indexed(&targets, &mut kept)
}

/// Greedy leftmost embedding of `current` into `full`, matching token and
/// sentence id.  Errors if `current` is not a subsequence of `full`.
pub fn leftmost_embedding(full: &Canvas, current: &Canvas) -> Result<Vec<usize>> {
    let mut kept = Vec::with_capacity(current.len());
    let mut j = 0;
    for i in 0..current.len() {
        let want = (current.tokens[i], current.sentence_ids[i]);
        loop {
            if j >= full.len() {
                return Err(Error::Contract(format!(
                    "canvas token {} (sentence {}) at position {i} does not embed into the target",
                    want.0, want.1
                )));
            }
            let have = (full.tokens[j], full.sentence_ids[j]);
            j += 1;
            if have == want {
                kept.push(j - 1);
                break;
            }
        }
    }
    Ok(kept)
}

/// Replays the ideal policy from the anchors-only canvas to the full target,
/// counting parallel steps.
pub fn oracle_decode(full: &Canvas) -> Result<(Canvas, usize)> {
    let mut canvas = Canvas::anchors_only(full.num_sentences())?;
    let mut kept = full.anchor_positions();
    let mut targets = SlotTargets::default();
    let mut steps = 0;
    loop {
        slot_targets_into(full, &kept, &mut targets)?;
        if targets.is_complete() {
            return Ok((canvas, steps));
        }
        let insertions = oracle_policy_step_indexed(&targets, &mut kept)?;
        canvas = apply_insertions(&canvas, &insertions)?;
        steps += 1;
    }
}

/// `ceil(log2(x))` for positive `x`.
pub fn ceil_log2(x: usize) -> u32 {
    if x <= 1 {
        0
    } else {
        usize::BITS - (x - 1).leading_zeros()
    }
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arb_sentences() -> impl Strategy<Value = Vec<Vec<Token>>> {
        prop::collection::vec(
            prop::collection::vec(FIRST_CONTENT..FIRST_CONTENT + 5, 0..7),
            1..5,
        )
    }

    proptest! {
        #[test]
        fn sampled_canvases_reconstruct(sentences in arb_sentences(), seed in 0u64..512) {
            let full = Canvas::from_sentences(&sentences).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (canvas, kept) = sample_intermediate_canvas(&full, &mut rng);
            let targets = slot_targets(&full, &kept).unwrap();
            prop_assert_eq!(targets.num_slots(), canvas.num_slots());

            let mut rebuilt: Vec<Token> = Vec::new();
            let mut rebuilt_sids: Vec<u32> = Vec::new();
            for slot in 0..targets.num_slots() {
                for e in targets.span(slot) {
                    rebuilt.push(e.token);
                    rebuilt_sids.push(e.sentence_id);
                }
                if slot < canvas.len() {
                    rebuilt.push(canvas.tokens()[slot]);
                    rebuilt_sids.push(canvas.sentence_ids()[slot]);
                }
            }
            prop_assert_eq!(rebuilt.as_slice(), full.tokens());
            prop_assert_eq!(rebuilt_sids.as_slice(), full.sentence_ids());
        }

        #[test]
        fn oracle_decode_always_rebuilds(sentences in arb_sentences()) {
            let full = Canvas::from_sentences(&sentences).unwrap();
            let (rebuilt, steps) = oracle_decode(&full).unwrap();
            prop_assert_eq!(&rebuilt, &full);
            let depth = sentences
                .iter()
                .map(|s| ceil_log2(s.len() + 1) as usize)
                .max()
                .unwrap_or(0);
            prop_assert_eq!(steps, depth);
        }

        #[test]
        fn insertion_rounds_preserve_validity(sentences in arb_sentences(), seed in 0u64..512) {
            let full = Canvas::from_sentences(&sentences).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (canvas, kept) = sample_intermediate_canvas(&full, &mut rng);
            let targets = slot_targets(&full, &kept).unwrap();
            let mut kept = kept;
            let insertions = oracle_policy_step_indexed(&targets, &mut kept).unwrap();
            let next = apply_insertions(&canvas, &insertions).unwrap();
            prop_assert_eq!(next.len(), canvas.len() + insertions.len());
            Canvas::new(next.tokens().to_vec(), next.sentence_ids().to_vec()).unwrap();
            slot_targets(&full, &kept).unwrap();
        }

        #[test]
        fn tree_weights_are_a_distribution(len in 1usize..40, tau in 0.1f64..5.0) {
            let w = binary_tree_weights(len, tau);
            prop_assert_eq!(w.len(), len);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..len {
                prop_assert!((w[i] - w[len - 1 - i]).abs() < 1e-12, "symmetric");
            }
            for i in 1..=(len - 1) / 2 {
                prop_assert!(w[i] >= w[i - 1], "weights rise toward the center");
            }
        }
    }
}
