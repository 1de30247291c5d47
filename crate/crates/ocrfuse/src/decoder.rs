//! Dual-source scoring: fixed vocabulary scores plus dynamic pointer scores
//! over OCR encoder outputs, and the greedy step selection rules.
//!
//! The iterative decode loop itself lives in [`crate::model`], which owns
//! the shared transformer; this module defines the step/score types and the
//! per-step operations.

use crate::error::Result;
use crate::tensor::{ParamId, Tape, TensorId};
use crate::vocab::{Vocabulary, END, UNK_TOKEN};

/// One emitted answer token: a fixed-vocabulary index or a pointer to an
/// OCR slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodingStep {
    Vocab(usize),
    Ocr(usize),
}

/// Output head: `weight` rows double as the input embeddings of previously
/// emitted vocabulary words (weight tying).
#[derive(Debug, Clone)]
pub struct VocabHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub vocab_size: usize,
}

/// Scores over vocabulary followed by OCR slots. `valid[i]` is false for
/// unpopulated OCR positions; those slots read as −∞.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    pub scores: TensorId,
    pub valid: Vec<bool>,
    pub vocab_size: usize,
}

impl ScoreVector {
    /// Concrete scores with −∞ at invalid slots, for argmax and reporting.
    pub fn masked_values(&self, tape: &Tape) -> Vec<f64> {
        tape.data(self.scores)
            .iter()
            .zip(&self.valid)
            .map(|(&s, &ok)| if ok { s } else { f64::NEG_INFINITY })
            .collect()
    }

    /// Greedy selection. Ties break toward the lower index, vocabulary
    /// before OCR (strictly-greater scan).
    pub fn argmax(&self, tape: &Tape) -> DecodingStep {
        let vals = self.masked_values(tape);
        let mut best = 0;
        for (i, v) in vals.iter().enumerate() {
            if *v > vals[best] {
                best = i;
            }
        }
        if best < self.vocab_size {
            DecodingStep::Vocab(best)
        } else {
            DecodingStep::Ocr(best - self.vocab_size)
        }
    }
}

/// scores[0..vocab) = W·h + b; scores[vocab + j] = ⟨h, ocr_outputs[j]⟩.
/// `head_w`/`head_b` are the head parameters already materialized on the
/// tape; `ocr_valid` marks populated OCR slots.
pub fn score_step(
    tape: &mut Tape,
    h: TensorId,
    ocr_outputs: TensorId,
    head_w: TensorId,
    head_b: TensorId,
    ocr_valid: &[bool],
) -> Result<ScoreVector> {
    let vocab_size = tape.shape(head_w)[0];
    let vocab_scores = tape.mat_vec(head_w, h)?;
    let vocab_scores = tape.add(vocab_scores, head_b)?;
    let ocr_scores = tape.mat_vec(ocr_outputs, h)?;
    let scores = tape.concat_cols(&[vocab_scores, ocr_scores])?;
    let mut valid = vec![true; vocab_size];
    valid.extend_from_slice(ocr_valid);
    Ok(ScoreVector {
        scores,
        valid,
        vocab_size,
    })
}

/// First answer word: argmax of the context-embedding scores.
pub fn first_word(
    tape: &mut Tape,
    context: TensorId,
    ocr_outputs: TensorId,
    head_w: TensorId,
    head_b: TensorId,
    ocr_valid: &[bool],
) -> Result<(DecodingStep, ScoreVector)> {
    let sv = score_step(tape, context, ocr_outputs, head_w, head_b, ocr_valid)?;
    Ok((sv.argmax(tape), sv))
}

/// Input embedding for the decoder slot that carries `prev`:
/// a vocabulary word forwards its head weight row, an OCR pointer forwards
/// the token's fused embedding; both then add the decoder-input role
/// embedding and the step-position embedding.
pub fn step_input_embedding(
    tape: &mut Tape,
    prev: DecodingStep,
    head_w: TensorId,
    ocr_embeddings: TensorId,
    role: TensorId,
    position: TensorId,
) -> Result<TensorId> {
    let base = match prev {
        DecodingStep::Vocab(i) => tape.select_row(head_w, i)?,
        DecodingStep::Ocr(j) => tape.select_row(ocr_embeddings, j)?,
    };
    let with_role = tape.add(base, role)?;
    tape.add(with_role, position)
}

/// True when the step is the end-of-answer marker.
pub fn is_end(step: DecodingStep) -> bool {
    matches!(step, DecodingStep::Vocab(i) if i == END)
}

/// Joins decoded steps with single spaces. OCR pointers render the
/// instance's OCR string verbatim; unknown-vocab steps render the literal
/// unk token.
pub fn render(steps: &[DecodingStep], vocab: &Vocabulary, ocr_strings: &[String]) -> String {
    steps
        .iter()
        .map(|s| match s {
            DecodingStep::Vocab(i) => {
                if *i < vocab.len() {
                    vocab.word(*i).to_string()
                } else {
                    UNK_TOKEN.to_string()
                }
            }
            DecodingStep::Ocr(j) => ocr_strings[*j].clone(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}
