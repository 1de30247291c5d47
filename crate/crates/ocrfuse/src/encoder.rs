//! Transformer fusion encoder over the summary vectors plus OCR token
//! slots, and the pairwise-product context embedding.
//!
//! Encoder, OCR slots and decoder slots live in the same transformer and
//! are distinguished only by role embeddings and the attention mask:
//! encoder slots attend each other bidirectionally and never see decoder
//! slots, decoder slot t attends every active encoder slot and decoder
//! slots ≤ t.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, TensorId};

/// Layer-norm epsilon used across the model.
pub const LN_EPS: f64 = 1e-5;

/// Number of transformer layers in the question encoder.
pub const QUESTION_LAYERS: usize = 3;

/// Role vocabulary: six summary slots, the OCR slot, padding, and decoder
/// inputs.
pub const ROLE_SUMMARY_BASE: usize = 0; // roles 0..6
pub const ROLE_OCR: usize = 6;
pub const ROLE_PAD: usize = 7;
pub const ROLE_DECODER: usize = 8;
pub const NUM_ROLES: usize = 9;

/// How many attention blocks the encoder runs (ablation axis). The full
/// model uses three: OCR visual-part, OCR linguistic-part, objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockConfig {
    OneBlock,
    TwoBlock,
    ThreeBlock,
}

impl BlockConfig {
    /// Number of fused summary vectors entering the transformer: one
    /// guidance + one block output per branch.
    pub fn num_summary_slots(&self) -> usize {
        match self {
            BlockConfig::OneBlock => 2,
            BlockConfig::TwoBlock => 4,
            BlockConfig::ThreeBlock => 6,
        }
    }

    pub fn num_branches(&self) -> usize {
        self.num_summary_slots() / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub textcaps_mode: bool,
    pub max_decode_steps: usize,
    pub vocab_size: usize,
    pub d_frcn: usize,
    pub d_recog: usize,
    pub d_glob: usize,
    pub l_max: usize,
    pub n_max: usize,
    pub m_max: usize,
    pub blocks: BlockConfig,
}

impl EncoderConfig {
    /// Desk-scale defaults: minutes-scale CPU training.
    pub fn desk_default() -> Self {
        EncoderConfig {
            num_layers: 4,
            num_heads: 4,
            d_model: 96,
            d_ff: 384,
            textcaps_mode: false,
            max_decode_steps: 12,
            vocab_size: 204,
            d_frcn: 64,
            d_recog: 32,
            d_glob: 64,
            l_max: 20,
            n_max: 50,
            m_max: 100,
            blocks: BlockConfig::ThreeBlock,
        }
    }

    /// Dimensions matching the reference setup (slow on CPU; provided for
    /// completeness).
    pub fn paper_preset() -> Self {
        EncoderConfig {
            num_layers: 8,
            num_heads: 12,
            d_model: 768,
            d_ff: 3072,
            textcaps_mode: false,
            max_decode_steps: 12,
            vocab_size: 5000,
            d_frcn: 2048,
            d_recog: 512,
            d_glob: 2048,
            l_max: 20,
            n_max: 50,
            m_max: 100,
            blocks: BlockConfig::ThreeBlock,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.max_decode_steps < 1 {
            return Err(Error::Config("max_decode_steps must be >= 1".into()));
        }
        if self.vocab_size <= crate::vocab::NUM_SPECIALS {
            return Err(Error::Config("vocab_size must exceed the special tokens".into()));
        }
        Ok(())
    }
}

/// Post-norm transformer encoder layer parameters (multi-head attention,
/// ReLU feed-forward, residuals, layer norms).
#[derive(Debug, Clone)]
pub struct TransformerLayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

impl TransformerLayerParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, d_ff: usize) -> Self {
        TransformerLayerParams {
            wq: store.add_linear(&format!("{name}.attn.wq"), d, d, rng),
            bq: store.add_zeros(&format!("{name}.attn.bq"), vec![d]),
            wk: store.add_linear(&format!("{name}.attn.wk"), d, d, rng),
            bk: store.add_zeros(&format!("{name}.attn.bk"), vec![d]),
            wv: store.add_linear(&format!("{name}.attn.wv"), d, d, rng),
            bv: store.add_zeros(&format!("{name}.attn.bv"), vec![d]),
            wo: store.add_linear(&format!("{name}.attn.wo"), d, d, rng),
            bo: store.add_zeros(&format!("{name}.attn.bo"), vec![d]),
            ln1_g: store.add_ones(&format!("{name}.ln1.g"), vec![d]),
            ln1_b: store.add_zeros(&format!("{name}.ln1.b"), vec![d]),
            ff1_w: store.add_linear(&format!("{name}.ff1.w"), d, d_ff, rng),
            ff1_b: store.add_zeros(&format!("{name}.ff1.b"), vec![d_ff]),
            ff2_w: store.add_linear(&format!("{name}.ff2.w"), d_ff, d, rng),
            ff2_b: store.add_zeros(&format!("{name}.ff2.b"), vec![d]),
            ln2_g: store.add_ones(&format!("{name}.ln2.g"), vec![d]),
            ln2_b: store.add_zeros(&format!("{name}.ln2.b"), vec![d]),
        }
    }
}

/// Bidirectional mask: active slots attend each other; every slot may
/// attend itself so no row degenerates.
pub fn bidirectional_mask(active: &[bool]) -> Vec<bool> {
    let n = active.len();
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            allowed[i * n + j] = (active[i] && active[j]) || i == j;
        }
    }
    allowed
}

/// Mixed mask for the shared encoder-decoder sequence: the first
/// `enc_active.len()` slots are encoder slots (bidirectional over active
/// ones, blind to decoder slots); the remaining `n_dec` decoder slots
/// attend every active encoder slot and decoder slots ≤ their own index.
pub fn mixed_mask(enc_active: &[bool], n_dec: usize) -> Vec<bool> {
    let e = enc_active.len();
    let n = e + n_dec;
    let mut allowed = vec![false; n * n];
    for i in 0..e {
        for j in 0..e {
            allowed[i * n + j] = (enc_active[i] && enc_active[j]) || i == j;
        }
    }
    for t in 0..n_dec {
        let row = e + t;
        for (j, &a) in enc_active.iter().enumerate() {
            allowed[row * n + j] = a;
        }
        for s in 0..=t {
            allowed[row * n + e + s] = true;
        }
    }
    allowed
}

/// One post-norm transformer encoder layer. `allowed` is the n×n
/// attention pattern (row attends column where true).
pub fn transformer_layer(
    tape: &mut Tape,
    store: &ParamStore,
    params: &TransformerLayerParams,
    seq: TensorId,
    allowed: &[bool],
    num_heads: usize,
) -> Result<TensorId> {
    let n = tape.shape(seq)[0];
    let d = tape.shape(seq)[1];
    assert_eq!(allowed.len(), n * n, "attention pattern size");
    assert_eq!(d % num_heads, 0);
    let dh = d / num_heads;

    let wq = tape.param(store, params.wq);
    let bq = tape.param(store, params.bq);
    let wk = tape.param(store, params.wk);
    let bk = tape.param(store, params.bk);
    let wv = tape.param(store, params.wv);
    let bv = tape.param(store, params.bv);
    let wo = tape.param(store, params.wo);
    let bo = tape.param(store, params.bo);

    let q = tape.matmul(seq, wq)?;
    let q = tape.add_row_broadcast(q, bq)?;
    let k = tape.matmul(seq, wk)?;
    let k = tape.add_row_broadcast(k, bk)?;
    let v = tape.matmul(seq, wv)?;
    let v = tape.add_row_broadcast(v, bv)?;

    let mut head_outputs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scores, allowed.to_vec())?;
        let ctx = tape.matmul(attn, vh)?;
        head_outputs.push(ctx);
    }
    let ctx = tape.concat_cols(&head_outputs)?;
    let proj = tape.matmul(ctx, wo)?;
    let proj = tape.add_row_broadcast(proj, bo)?;
    let res1 = tape.add(seq, proj)?;
    let g1 = tape.param(store, params.ln1_g);
    let b1 = tape.param(store, params.ln1_b);
    let norm1 = tape.layer_norm(res1, g1, b1, LN_EPS)?;

    let f1w = tape.param(store, params.ff1_w);
    let f1b = tape.param(store, params.ff1_b);
    let f2w = tape.param(store, params.ff2_w);
    let f2b = tape.param(store, params.ff2_b);
    let ff = tape.matmul(norm1, f1w)?;
    let ff = tape.add_row_broadcast(ff, f1b)?;
    let ff = tape.relu(ff);
    let ff = tape.matmul(ff, f2w)?;
    let ff = tape.add_row_broadcast(ff, f2b)?;
    let res2 = tape.add(norm1, ff)?;
    let g2 = tape.param(store, params.ln2_g);
    let b2 = tape.param(store, params.ln2_b);
    tape.layer_norm(res2, g2, b2, LN_EPS)
}

/// Summary slots plus OCR token embeddings ready for fusion.
#[derive(Debug, Clone)]
pub struct FusionState {
    /// Guidance summaries then block outputs, in slot order
    /// (Q_v, Q_l, Q_o, g_ocr_v, g_ocr_l, g_obj for the three-block model).
    pub summaries: Vec<TensorId>,
    /// Combined per-token embeddings [n_max × d]; padded rows are zero.
    pub ocr_embeddings: TensorId,
    /// Populated OCR slots.
    pub ocr_mask: Vec<bool>,
}

/// Output of the fusion pass.
#[derive(Debug, Clone)]
pub struct FusedOutput {
    pub summaries: Vec<TensorId>,
    pub ocr_outputs: TensorId,
}

/// Runs the (k + N)-slot sequence through the stacked transformer layers
/// and returns the k transformed summaries and N transformed OCR outputs.
/// Role embeddings are added before the first layer.
pub fn fuse(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[TransformerLayerParams],
    role_table: ParamId,
    state: &FusionState,
    num_heads: usize,
) -> Result<FusedOutput> {
    let k = state.summaries.len();
    let seq = fused_sequence(tape, store, role_table, state, &[])?;
    let active = encoder_active(state);
    let allowed = bidirectional_mask(&active);
    let mut x = seq;
    for layer in layers {
        x = transformer_layer(tape, store, layer, x, &allowed, num_heads)?;
    }
    let mut summaries = Vec::with_capacity(k);
    for i in 0..k {
        summaries.push(tape.select_row(x, i)?);
    }
    let n = state.ocr_mask.len();
    let ocr_outputs = tape.slice_rows(x, k, n)?;
    Ok(FusedOutput { summaries, ocr_outputs })
}

/// Active pattern of the encoder slots: summaries always, OCR per mask.
pub fn encoder_active(state: &FusionState) -> Vec<bool> {
    let mut active = vec![true; state.summaries.len()];
    active.extend_from_slice(&state.ocr_mask);
    active
}

/// Builds the transformer input sequence: role-embedded summaries, OCR
/// slots, then any decoder-input rows (already role/position embedded).
pub fn fused_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    role_table: ParamId,
    state: &FusionState,
    decoder_rows: &[TensorId],
) -> Result<TensorId> {
    let roles = tape.param(store, role_table);
    let mut rows = Vec::with_capacity(state.summaries.len());
    for (i, &s) in state.summaries.iter().enumerate() {
        // one-/two-block variants use a prefix of the six roles: guidance
        // summaries map to roles 0..b, block outputs to roles 3..3+b
        let b = state.summaries.len() / 2;
        let role_idx = if i < b { ROLE_SUMMARY_BASE + i } else { 3 + (i - b) };
        let r = tape.select_row(roles, role_idx)?;
        rows.push(tape.add(s, r)?);
    }
    let summary_mat = tape.stack_rows(&rows)?;
    let ocr_role_ids: Vec<usize> = state
        .ocr_mask
        .iter()
        .map(|&ok| if ok { ROLE_OCR } else { ROLE_PAD })
        .collect();
    let ocr_roles = tape.embedding_lookup(roles, &ocr_role_ids)?;
    let ocr_mat = tape.add(state.ocr_embeddings, ocr_roles)?;
    let mut parts = vec![summary_mat, ocr_mat];
    if !decoder_rows.is_empty() {
        let dec_mat = tape.stack_rows(decoder_rows)?;
        parts.push(dec_mat);
    }
    tape.concat_rows(&parts)
}

/// Pairwise element-wise products of guidance/summary pairs, concatenated
/// and linearly mapped back to d_model. Predicts the first answer word.
pub fn context_embedding(
    tape: &mut Tape,
    store: &ParamStore,
    fused_summaries: &[TensorId],
    ctx_w: ParamId,
    ctx_b: ParamId,
) -> Result<TensorId> {
    let b = fused_summaries.len() / 2;
    let mut products = Vec::with_capacity(b);
    for i in 0..b {
        products.push(tape.mul(fused_summaries[i], fused_summaries[b + i])?);
    }
    let cat = tape.concat_cols(&products)?;
    let w = tape.param(store, ctx_w);
    let bias = tape.param(store, ctx_b);
    let out = tape.vec_mat(cat, w)?;
    tape.add(out, bias)
}
