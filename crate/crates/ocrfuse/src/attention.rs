//! Query-guided soft selection: question self-attention pooling, the
//! attention block that summarizes a feature sequence under a guidance
//! vector, and the recurrent sequence encoder used for caption-mode
//! guidance.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, TensorId};

/// Content-only self-attention pooling: two 1×1 transformations with a ReLU
/// between them produce per-position logits; the masked softmax weights a
/// sum of the input rows. Each guided branch owns an independent head.
/// The second transformation carries no bias: a uniform logit shift is
/// softmax-invariant, so such a bias could never receive gradient.
#[derive(Debug, Clone)]
pub struct SelfAttentionHead {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
}

impl SelfAttentionHead {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, d_hidden: usize) -> Self {
        SelfAttentionHead {
            conv1_w: store.add_linear(&format!("{name}.conv1.w"), d_model, d_hidden, rng),
            conv1_b: store.add_zeros(&format!("{name}.conv1.b"), vec![d_hidden]),
            conv2_w: store.add_linear(&format!("{name}.conv2.w"), d_hidden, 1, rng),
        }
    }

    /// Pools rows of `seq` [L×d] into one [d] vector; masked rows receive
    /// zero weight. The output lies in the convex hull of the unmasked rows.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, seq: TensorId, mask: &[bool]) -> Result<TensorId> {
        let w1 = tape.param(store, self.conv1_w);
        let b1 = tape.param(store, self.conv1_b);
        let w2 = tape.param(store, self.conv2_w);
        let h = tape.matmul(seq, w1)?;
        let h = tape.add_row_broadcast(h, b1)?;
        let h = tape.relu(h);
        let logits = tape.matmul(h, w2)?; // [L×1]
        let logits = tape.transpose(logits)?; // [1×L]
        let logits = tape.select_row(logits, 0)?; // [L]
        let weights = tape.softmax_masked(logits, mask)?;
        tape.vec_mat(weights, seq)
    }
}

/// Parameters of one attention block: p_i = W[relu(W_s q) ∘ relu(W_x x_i)].
/// One independent set per block.
#[derive(Debug, Clone)]
pub struct AttentionBlockParams {
    pub w_s: ParamId,
    pub w_x: ParamId,
    pub w: ParamId,
    pub d_att: usize,
}

impl AttentionBlockParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, d_att: usize) -> Self {
        AttentionBlockParams {
            w_s: store.add_linear(&format!("{name}.w_s"), d_model, d_att, rng),
            w_x: store.add_linear(&format!("{name}.w_x"), d_model, d_att, rng),
            w: store.add_linear(&format!("{name}.w"), d_att, 1, rng),
            d_att,
        }
    }

    /// Summarizes `feats` [n×d] under `query` [d]: masked softmax over
    /// p_i = W[relu(W_s·query) ∘ relu(W_x·x_i)], then the weighted sum of
    /// the original rows.
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: TensorId,
        feats: TensorId,
        mask: &[bool],
    ) -> Result<TensorId> {
        let n = tape.shape(feats)[0];
        let w_s = tape.param(store, self.w_s);
        let w_x = tape.param(store, self.w_x);
        let w = tape.param(store, self.w);
        let sq = tape.vec_mat(query, w_s)?;
        let sq = tape.relu(sq); // [d_att]
        let hx = tape.matmul(feats, w_x)?;
        let hx = tape.relu(hx); // [n×d_att]
        let sq_rows = tape.stack_rows(&vec![sq; n])?;
        let prod = tape.mul(hx, sq_rows)?;
        let p = tape.matmul(prod, w)?; // [n×1]
        let p = tape.transpose(p)?;
        let p = tape.select_row(p, 0)?; // [n]
        let s = tape.softmax_masked(p, mask)?;
        tape.vec_mat(s, feats)
    }

    /// Attention weights only (for invariant tests).
    pub fn weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: TensorId,
        feats: TensorId,
        mask: &[bool],
    ) -> Result<TensorId> {
        let n = tape.shape(feats)[0];
        let w_s = tape.param(store, self.w_s);
        let w_x = tape.param(store, self.w_x);
        let w = tape.param(store, self.w);
        let sq = tape.vec_mat(query, w_s)?;
        let sq = tape.relu(sq);
        let hx = tape.matmul(feats, w_x)?;
        let hx = tape.relu(hx);
        let sq_rows = tape.stack_rows(&vec![sq; n])?;
        let prod = tape.mul(hx, sq_rows)?;
        let p = tape.matmul(prod, w)?;
        let p = tape.transpose(p)?;
        let p = tape.select_row(p, 0)?;
        tape.softmax_masked(p, mask)
    }
}

/// Single-layer LSTM parameters; gate order is input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub d: usize,
}

impl LstmParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize) -> Self {
        LstmParams {
            w_ih: store.add_linear(&format!("{name}.w_ih"), d, 4 * d, rng),
            w_hh: store.add_linear(&format!("{name}.w_hh"), d, 4 * d, rng),
            b: store.add_zeros(&format!("{name}.b"), vec![4 * d]),
            d,
        }
    }
}

/// Left-to-right LSTM pass over `feats` [n×d] producing per-position
/// hidden states [n×d]; zero initial state. Applied to guidance sequences
/// before self-attention pooling in caption mode.
pub fn recurrent_sequence_encode(
    tape: &mut Tape,
    store: &ParamStore,
    params: &LstmParams,
    feats: TensorId,
) -> Result<TensorId> {
    let n = tape.shape(feats)[0];
    let d = params.d;
    let w_ih = tape.param(store, params.w_ih);
    let w_hh = tape.param(store, params.w_hh);
    let b = tape.param(store, params.b);
    let mut h = tape.constant_vec(vec![0.0; d]);
    let mut c = tape.constant_vec(vec![0.0; d]);
    let mut states = Vec::with_capacity(n);
    for t in 0..n {
        let x = tape.select_row(feats, t)?;
        let gi = tape.vec_mat(x, w_ih)?;
        let gh = tape.vec_mat(h, w_hh)?;
        let gates = tape.add(gi, gh)?;
        let gates = tape.add(gates, b)?;
        let i_g = tape.slice_cols(gates, 0, d)?;
        let f_g = tape.slice_cols(gates, d, d)?;
        let g_g = tape.slice_cols(gates, 2 * d, d)?;
        let o_g = tape.slice_cols(gates, 3 * d, d)?;
        let i_g = tape.sigmoid(i_g);
        let f_g = tape.sigmoid(f_g);
        let g_g = tape.tanh(g_g);
        let o_g = tape.sigmoid(o_g);
        let fc = tape.mul(f_g, c)?;
        let ig = tape.mul(i_g, g_g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        h = tape.mul(o_g, tc)?;
        states.push(h);
    }
    tape.stack_rows(&states)
}
