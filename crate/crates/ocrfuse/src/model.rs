//! Full model assembly: feature projections, guidance summaries, attention
//! blocks, shared fusion/decoder transformer, and the dual-source output
//! head.
//!
//! Question-answering mode pools the encoded question into three guidance
//! vectors; caption mode has no question and instead derives guidance from
//! the OCR/object sequences themselves (LSTM pass, then the same pooling).

use crate::attention::{recurrent_sequence_encode, AttentionBlockParams, LstmParams, SelfAttentionHead};
use crate::decoder::{
    first_word, is_end, score_step, step_input_embedding, DecodingStep, ScoreVector, VocabHead,
};
use crate::encoder::{
    context_embedding, encoder_active, fuse, fused_sequence, mixed_mask, transformer_layer,
    BlockConfig, EncoderConfig, FusionState, TransformerLayerParams, NUM_ROLES, ROLE_DECODER,
};
use crate::error::{Error, Result};
use crate::features::{prepare, prepare_merged, FeatureParams, QuestionEncoder};
use crate::harness::data::Instance;
use crate::objectives::{bce_loss, build_targets, pg_loss, LossConfig, StepTargets};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, TensorId};
use crate::vocab::{Vocabulary, UNK};

#[derive(Debug, Clone)]
pub struct TextModel {
    pub cfg: EncoderConfig,
    pub feat: FeatureParams,
    pub question: QuestionEncoder,
    pub lstm_obj: LstmParams,
    pub lstm_ocr: LstmParams,
    pub heads: Vec<SelfAttentionHead>,
    pub blocks: Vec<AttentionBlockParams>,
    pub fusion_layers: Vec<TransformerLayerParams>,
    pub role_table: ParamId,
    pub dec_pos: ParamId,
    pub ctx_w: ParamId,
    pub ctx_b: ParamId,
    pub head: VocabHead,
}

impl TextModel {
    /// Creates every parameter in a fixed order so that runs with the same
    /// seed are reproducible and ablation variants share initial values for
    /// their common parameters.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let feat = FeatureParams::new(store, rng, cfg);
        let question = QuestionEncoder::new(store, rng, cfg);
        let lstm_obj = LstmParams::new(store, rng, "guide.lstm_obj", d);
        let lstm_ocr = LstmParams::new(store, rng, "guide.lstm_ocr", d);
        let heads = (0..3)
            .map(|i| SelfAttentionHead::new(store, rng, &format!("selfattn.{}", ["v", "l", "o"][i]), d, d))
            .collect();
        let blocks = (0..3)
            .map(|i| AttentionBlockParams::new(store, rng, &format!("block.{}", ["v", "l", "o"][i]), d, d))
            .collect();
        let fusion_layers = (0..cfg.num_layers)
            .map(|i| TransformerLayerParams::new(store, rng, &format!("fusion.layer{i}"), d, cfg.d_ff))
            .collect();
        let role_table = store.add_embedding("fusion.roles", NUM_ROLES, d, rng);
        let dec_pos = store.add_embedding("decoder.pos", cfg.max_decode_steps, d, rng);
        let n_branches = cfg.blocks.num_branches();
        let ctx_w = store.add_linear("context.w", n_branches * d, d, rng);
        let ctx_b = store.add_zeros("context.b", vec![d]);
        let head = VocabHead {
            weight: store.add_embedding("head.weight", cfg.vocab_size, d, rng),
            bias: store.add_zeros("head.bias", vec![cfg.vocab_size]),
            vocab_size: cfg.vocab_size,
        };
        Ok(TextModel {
            cfg: cfg.clone(),
            feat,
            question,
            lstm_obj,
            lstm_ocr,
            heads,
            blocks,
            fusion_layers,
            role_table,
            dec_pos,
            ctx_w,
            ctx_b,
            head,
        })
    }

    fn active_branches(&self) -> usize {
        self.cfg.blocks.num_branches()
    }

    /// Guidance vectors, one per branch. QA mode pools the encoded
    /// question through the per-branch self-attention heads; caption mode
    /// pools LSTM-encoded OCR/object sequences (objects guide the OCR
    /// branches, OCR guides the object branch).
    fn guidance(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        instance: &Instance,
        feats: &BranchFeatures,
    ) -> Result<Vec<TensorId>> {
        let b = self.active_branches();
        let mut out = Vec::with_capacity(b);
        if self.cfg.textcaps_mode {
            let n_obj = instance.objects.len();
            let n_ocr = instance.ocr.len();
            if n_ocr == 0 {
                return Err(Error::Data(format!(
                    "instance {}: caption mode needs at least one OCR token",
                    instance.id
                )));
            }
            // object guidance states (for OCR-feature branches)
            let obj_states = if n_obj > 0 {
                let populated = tape.slice_rows(feats.objects_or_zero, 0, n_obj)?;
                Some(recurrent_sequence_encode(tape, store, &self.lstm_obj, populated)?)
            } else {
                None
            };
            let ocr_populated = tape.slice_rows(feats.ocr_embeddings, 0, n_ocr)?;
            let ocr_states = recurrent_sequence_encode(tape, store, &self.lstm_ocr, ocr_populated)?;
            for i in 0..b {
                let is_object_branch = self.cfg.blocks == BlockConfig::ThreeBlock && i == 2;
                let pooled = if is_object_branch {
                    self.heads[i].apply(tape, store, ocr_states, &vec![true; n_ocr])?
                } else {
                    match &obj_states {
                        Some(s) => self.heads[i].apply(tape, store, *s, &vec![true; n_obj])?,
                        // no objects to guide with: fall back to the OCR states
                        None => self.heads[i].apply(tape, store, ocr_states, &vec![true; n_ocr])?,
                    }
                };
                out.push(pooled);
            }
        } else {
            if instance.question_tokens.is_empty() {
                return Err(Error::Data(format!(
                    "instance {}: QA mode needs question tokens",
                    instance.id
                )));
            }
            let active = vec![true; instance.question_tokens.len()];
            let q = self.question.encode(tape, store, &instance.question_tokens, &active)?;
            for i in 0..b {
                out.push(self.heads[i].apply(tape, store, q, &active)?);
            }
        }
        Ok(out)
    }

    /// Per-branch feature sequences and the combined OCR slot embeddings.
    fn branch_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        instance: &Instance,
    ) -> Result<BranchFeatures> {
        match self.cfg.blocks {
            BlockConfig::OneBlock => {
                let (merged, ocr_mask) = prepare_merged(tape, store, &self.feat, &instance.ocr, &self.cfg)?;
                Ok(BranchFeatures {
                    sequences: vec![(merged, ocr_mask.clone())],
                    ocr_embeddings: merged,
                    ocr_mask,
                    objects_or_zero: merged, // unused in one-block mode
                })
            }
            BlockConfig::TwoBlock | BlockConfig::ThreeBlock => {
                let prep = prepare(tape, store, &self.feat, &instance.ocr, &instance.objects, &self.cfg)?;
                let combined = tape.add(prep.ocr_visual, prep.ocr_linguistic)?;
                let mut sequences = vec![
                    (prep.ocr_visual, prep.ocr_mask.clone()),
                    (prep.ocr_linguistic, prep.ocr_mask.clone()),
                ];
                if self.cfg.blocks == BlockConfig::ThreeBlock {
                    sequences.push((prep.objects, prep.obj_mask.clone()));
                }
                Ok(BranchFeatures {
                    sequences,
                    ocr_embeddings: combined,
                    ocr_mask: prep.ocr_mask,
                    objects_or_zero: prep.objects,
                })
            }
        }
    }

    /// Feature prep, guidance and blocks: everything before the fusion
    /// transformer.
    fn build_state(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        instance: &Instance,
    ) -> Result<(FusionState, u64)> {
        let feats = self.branch_features(tape, store, instance)?;
        let guidance = self.guidance(tape, store, instance, &feats)?;
        let counted_from = tape.mul_adds();
        let b = self.active_branches();
        let mut summaries = guidance.clone();
        for i in 0..b {
            let (seq, mask) = &feats.sequences[i];
            if !mask.iter().any(|&m| m) {
                return Err(Error::DegenerateMask { row: 0 });
            }
            summaries.push(self.blocks[i].apply(tape, store, guidance[i], *seq, mask)?);
        }
        let state = FusionState {
            summaries,
            ocr_embeddings: feats.ocr_embeddings,
            ocr_mask: feats.ocr_mask.clone(),
        };
        Ok((state, counted_from))
    }

    /// Shared transformer over encoder slots plus optional decoder rows.
    fn fused_pass(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: &FusionState,
        decoder_rows: &[TensorId],
    ) -> Result<TensorId> {
        let seq = fused_sequence(tape, store, self.role_table, state, decoder_rows)?;
        let allowed = mixed_mask(&encoder_active(state), decoder_rows.len());
        let mut x = seq;
        for layer in &self.fusion_layers {
            x = transformer_layer(tape, store, layer, x, &allowed, self.cfg.num_heads)?;
        }
        Ok(x)
    }

    /// Encoder pass: guidance, blocks, fusion, context embedding.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, instance: &Instance) -> Result<EncoderPass> {
        let (state, counted_from) = self.build_state(tape, store, instance)?;
        let blocks_done = tape.mul_adds();
        let fused = fuse(tape, store, &self.fusion_layers, self.role_table, &state, self.cfg.num_heads)?;
        let fuse_done = tape.mul_adds();
        let context = context_embedding(tape, store, &fused.summaries, self.ctx_w, self.ctx_b)?;
        Ok(EncoderPass {
            fused_summaries: fused.summaries,
            ocr_outputs: fused.ocr_outputs,
            context,
            state,
            counts: EncodeCounts {
                blocks: blocks_done - counted_from,
                fusion: fuse_done - blocks_done,
            },
        })
    }

    /// Greedy autoregressive decoding, at most `max_steps` emissions; the
    /// end token terminates early and is excluded from the output.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pass: &EncoderPass,
        max_steps: usize,
    ) -> Result<Vec<DecodingStep>> {
        let head_w = tape.param(store, self.head.weight);
        let head_b = tape.param(store, self.head.bias);
        let (a0, _) = first_word(tape, pass.context, pass.ocr_outputs, head_w, head_b, &pass.state.ocr_mask)?;
        if is_end(a0) {
            return Ok(Vec::new());
        }
        let mut steps = vec![a0];
        let k = pass.state.summaries.len();
        let n = pass.state.ocr_mask.len();
        for t in 1..max_steps {
            let sv = self.decoder_step_scores(tape, store, pass, &steps, head_w, head_b, k, n)?;
            let at = sv.argmax(tape);
            if is_end(at) {
                break;
            }
            steps.push(at);
            let _ = t;
        }
        Ok(steps)
    }

    /// Scores for the next step given the emitted prefix: the prefix is
    /// embedded into decoder slots, the shared transformer runs with the
    /// mixed mask, and the last decoder output is scored.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_step_scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pass: &EncoderPass,
        prefix: &[DecodingStep],
        head_w: TensorId,
        head_b: TensorId,
        k: usize,
        n: usize,
    ) -> Result<ScoreVector> {
        let dec_pos = tape.param(store, self.dec_pos);
        let roles = tape.param(store, self.role_table);
        let dec_role = tape.select_row(roles, ROLE_DECODER)?;
        let mut rows = Vec::with_capacity(prefix.len());
        for (s, &step) in prefix.iter().enumerate() {
            let pos = tape.select_row(dec_pos, s)?;
            rows.push(step_input_embedding(
                tape,
                step,
                head_w,
                pass.state.ocr_embeddings,
                dec_role,
                pos,
            )?);
        }
        let x = self.fused_pass(tape, store, &pass.state, &rows)?;
        let h = tape.select_row(x, k + n + prefix.len() - 1)?;
        let ocr_outputs = tape.slice_rows(x, k, n)?;
        score_step(tape, h, ocr_outputs, head_w, head_b, &pass.state.ocr_mask)
    }

    /// Embedding source for a ground-truth word during teacher forcing:
    /// its vocabulary row when in-vocabulary, else its first matching OCR
    /// slot, else the unk row.
    pub fn gt_input_steps(answer: &str, vocab: &Vocabulary, ocr_strings: &[String]) -> Vec<DecodingStep> {
        answer
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                if let Some(i) = vocab.index_of(&w) {
                    DecodingStep::Vocab(i)
                } else if let Some(j) = ocr_strings.iter().position(|s| *s == w) {
                    DecodingStep::Ocr(j)
                } else {
                    DecodingStep::Vocab(UNK)
                }
            })
            .collect()
    }

    /// Teacher-forced scoring of every target step in one transformer pass
    /// under the causal mask. Step 0 is scored from the context embedding,
    /// step i ≥ 1 from the decoder slot carrying ground-truth word i−1.
    pub fn teacher_forced_scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pass: &EncoderPass,
        gt_steps: &[DecodingStep],
    ) -> Result<Vec<ScoreVector>> {
        let head_w = tape.param(store, self.head.weight);
        let head_b = tape.param(store, self.head.bias);
        let k = pass.state.summaries.len();
        let n = pass.state.ocr_mask.len();
        let mut scores = Vec::with_capacity(gt_steps.len() + 1);
        let sv0 = score_step(tape, pass.context, pass.ocr_outputs, head_w, head_b, &pass.state.ocr_mask)?;
        scores.push(sv0);
        if gt_steps.is_empty() {
            return Ok(scores);
        }
        let dec_pos = tape.param(store, self.dec_pos);
        let roles = tape.param(store, self.role_table);
        let dec_role = tape.select_row(roles, ROLE_DECODER)?;
        let mut rows = Vec::with_capacity(gt_steps.len());
        for (s, &step) in gt_steps.iter().enumerate() {
            let pos = tape.select_row(dec_pos, s)?;
            rows.push(step_input_embedding(
                tape,
                step,
                head_w,
                pass.state.ocr_embeddings,
                dec_role,
                pos,
            )?);
        }
        let x = self.fused_pass(tape, store, &pass.state, &rows)?;
        let ocr_outputs = tape.slice_rows(x, k, n)?;
        for s in 0..gt_steps.len() {
            let h = tape.select_row(x, k + n + s)?;
            scores.push(score_step(tape, h, ocr_outputs, head_w, head_b, &pass.state.ocr_mask)?);
        }
        Ok(scores)
    }

    /// Teacher-forced scoring in a single transformer pass: the encoder
    /// slots and the ground-truth decoder slots share one run under the
    /// mixed mask (masking makes this equal to encoding first and scoring
    /// separately — see the causal-equivalence test).
    pub fn training_scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        instance: &Instance,
        gt_steps: &[DecodingStep],
    ) -> Result<Vec<ScoreVector>> {
        let (state, _) = self.build_state(tape, store, instance)?;
        let head_w = tape.param(store, self.head.weight);
        let head_b = tape.param(store, self.head.bias);
        let mut rows = Vec::with_capacity(gt_steps.len());
        if !gt_steps.is_empty() {
            let dec_pos = tape.param(store, self.dec_pos);
            let roles = tape.param(store, self.role_table);
            let dec_role = tape.select_row(roles, ROLE_DECODER)?;
            for (s, &step) in gt_steps.iter().enumerate() {
                let pos = tape.select_row(dec_pos, s)?;
                rows.push(step_input_embedding(
                    tape,
                    step,
                    head_w,
                    state.ocr_embeddings,
                    dec_role,
                    pos,
                )?);
            }
        }
        let x = self.fused_pass(tape, store, &state, &rows)?;
        let k = state.summaries.len();
        let n = state.ocr_mask.len();
        let mut fused_summaries = Vec::with_capacity(k);
        for i in 0..k {
            fused_summaries.push(tape.select_row(x, i)?);
        }
        let ocr_outputs = tape.slice_rows(x, k, n)?;
        let context = context_embedding(tape, store, &fused_summaries, self.ctx_w, self.ctx_b)?;
        let mut scores = Vec::with_capacity(gt_steps.len() + 1);
        scores.push(score_step(tape, context, ocr_outputs, head_w, head_b, &state.ocr_mask)?);
        for s in 0..gt_steps.len() {
            let h = tape.select_row(x, k + n + s)?;
            scores.push(score_step(tape, h, ocr_outputs, head_w, head_b, &state.ocr_mask)?);
        }
        Ok(scores)
    }

    /// Teacher-forced training loss for one instance (first listed answer):
    /// BCE, plus the ANLS policy-gradient term when enabled with α > 0.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        instance: &Instance,
        vocab: &Vocabulary,
        loss_cfg: &LossConfig,
    ) -> Result<(TensorId, Vec<ScoreVector>, StepTargets)> {
        let answer = &instance.answers[0];
        let ocr_strings = instance.ocr_strings();
        let targets = build_targets(answer, vocab, &ocr_strings, self.cfg.n_max, self.cfg.max_decode_steps)?;
        let gt_steps = Self::gt_input_steps(answer, vocab, &ocr_strings);
        let scores = self.training_scores(tape, store, instance, &gt_steps)?;
        let bce = bce_loss(tape, &scores, &targets)?;
        let total = if loss_cfg.pg_enabled && loss_cfg.alpha != 0.0 {
            let pg = pg_loss(tape, &scores, &targets, answer, vocab, &ocr_strings)?;
            let weighted = tape.scale(pg, loss_cfg.alpha);
            tape.add(bce, weighted)?
        } else {
            bce
        };
        Ok((total, scores, targets))
    }

    /// Shrinks (or grows) the padded slot budgets; parameters are
    /// independent of these, and padded slots are inert, so outputs for any
    /// given instance are unchanged.
    pub fn with_slot_budget(&self, n_max: usize, m_max: usize) -> TextModel {
        let mut cfg = self.cfg.clone();
        cfg.n_max = n_max;
        cfg.m_max = m_max;
        TextModel { cfg, ..self.clone() }
    }

    /// Decodes one instance on a fresh tape and renders the answer.
    pub fn decode_instance(
        &self,
        store: &ParamStore,
        instance: &Instance,
        vocab: &Vocabulary,
    ) -> Result<(String, Vec<DecodingStep>)> {
        let mut tape = Tape::new();
        let pass = self.encode(&mut tape, store, instance)?;
        let steps = self.decode(&mut tape, store, &pass, self.cfg.max_decode_steps)?;
        let rendered = crate::decoder::render(&steps, vocab, &instance.ocr_strings());
        Ok((rendered, steps))
    }
}

/// Per-branch feature sequences plus the combined OCR slot embeddings.
struct BranchFeatures {
    sequences: Vec<(TensorId, Vec<bool>)>,
    ocr_embeddings: TensorId,
    ocr_mask: Vec<bool>,
    objects_or_zero: TensorId,
}

/// Multiply-add tallies of the encoder stages, for the complexity profiler.
#[derive(Debug, Clone, Copy)]
pub struct EncodeCounts {
    pub blocks: u64,
    pub fusion: u64,
}

/// Everything downstream consumers need from the encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    pub fused_summaries: Vec<TensorId>,
    pub ocr_outputs: TensorId,
    pub context: TensorId,
    pub state: FusionState,
    pub counts: EncodeCounts,
}
