//! Greedy parallel decoding: every round scores all slots of the current
//! canvas at once and applies one insertion per slot that is not yet
//! complete, so a well-trained model finishes a length-`n` sentence in about
//! `log2(n)` rounds instead of `n`.
//!
//! Decoding starts from a canvas holding one anchor per source sentence.
//! Anchors are never inserted (reserved ids are excluded from the argmax) and
//! never removed (insertion only adds tokens), so the sentence alignment
//! fixed at initialization survives to the final canvas by construction.

use crate::canvas::{apply_insertions, Canvas, Insertion, Token, FIRST_CONTENT};
use crate::error::{Error, Result};
use crate::model::{Forward, Network};
use crate::numerics::{Parameters, Scalar};

/// Caps on a single decode. `max_len` bounds the canvas length including
/// anchors (checked between rounds, so one final round may overshoot);
/// `max_steps` bounds the number of rounds. Unset caps fall back to
/// [`default_max_len`] and no round cap.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeOptions {
    pub max_len: Option<usize>,
    pub max_steps: Option<usize>,
}

/// Twice the source length plus the anchors: roomy enough for any synthetic
/// task in this crate while still forcing runaway decodes to stop.
pub fn default_max_len(src_len: usize, num_sentences: usize) -> usize {
    2 * src_len + num_sentences
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Every slot predicted the completion class.
    Completed,
    LengthLimit,
    StepLimit,
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub canvas: Canvas,
    /// The insertions applied in each round, in order. Replaying them from
    /// the initial canvas reproduces `canvas` exactly.
    pub rounds: Vec<Vec<Insertion>>,
    pub reason: StopReason,
}

impl DecodeOutcome {
    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }
}

/// The canvas every decode starts from: one anchor per source sentence.
pub fn init_canvas(num_sentences: usize) -> Result<Canvas> {
    Canvas::anchors_only(num_sentences)
}

/// Scores the current canvas and picks, for every slot, the best class among
/// the content tokens and the completion class (ties go to the lowest class
/// index). Returns the insertions for the slots that chose a token. Slot 0
/// precedes the first anchor, which no valid canvas may have, so it is
/// always treated as complete.
pub fn decode_step<S: Scalar>(
    net: &Network,
    params: &Parameters<S>,
    src_tokens: &[Token],
    src_sentence_ids: &[u32],
    canvas: &Canvas,
) -> Result<Vec<Insertion>> {
    let mut fwd = Forward::new(params);
    let logits = net.forward_slots(&mut fwd, src_tokens, src_sentence_ids, canvas)?;
    let value = fwd.tape.value(logits);
    if !value.all_finite() {
        return Err(Error::NonFinite("slot logits".into()));
    }
    let (slots, classes) = value.dims2()?;
    let end_class = classes - 1;
    let mut insertions = Vec::new();
    for slot in 1..slots {
        let row = value.row(slot);
        let mut best = FIRST_CONTENT as usize;
        for class in (FIRST_CONTENT as usize + 1)..classes {
            if row[class] > row[best] {
                best = class;
            }
        }
        if best != end_class {
            insertions.push(Insertion {
                slot,
                token: best as Token,
            });
        }
    }
    Ok(insertions)
}

/// Runs rounds of [`decode_step`] from the anchor-only canvas until every
/// slot reports complete or a cap is reached.
pub fn decode<S: Scalar>(
    net: &Network,
    params: &Parameters<S>,
    src_tokens: &[Token],
    src_sentence_ids: &[u32],
    num_sentences: usize,
    opts: DecodeOptions,
) -> Result<DecodeOutcome> {
    let max_len = opts
        .max_len
        .unwrap_or_else(|| default_max_len(src_tokens.len(), num_sentences));
    let mut canvas = init_canvas(num_sentences)?;
    let mut rounds = Vec::new();
    let reason = loop {
        if canvas.len() >= max_len {
            break StopReason::LengthLimit;
        }
        if let Some(cap) = opts.max_steps {
            if rounds.len() >= cap {
                break StopReason::StepLimit;
            }
        }
        let insertions = decode_step(net, params, src_tokens, src_sentence_ids, &canvas)?;
        if insertions.is_empty() {
            break StopReason::Completed;
        }
        canvas = apply_insertions(&canvas, &insertions)?;
        rounds.push(insertions);
    };
    Ok(DecodeOutcome {
        canvas,
        rounds,
        reason,
    })
}

/// Reapplies a recorded decode from scratch.
pub fn replay(num_sentences: usize, rounds: &[Vec<Insertion>]) -> Result<Canvas> {
    let mut canvas = init_canvas(num_sentences)?;
    for round in rounds {
        canvas = apply_insertions(&canvas, round)?;
    }
    Ok(canvas)
}
