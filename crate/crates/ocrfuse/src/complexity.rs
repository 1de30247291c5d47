//! Operation-count model of the two encoder families: a closed-form count
//! (sequence-pair interactions per transformer layer, element-wise work per
//! attention block) and an instrumented multiply-add tally over the real
//! forward pass.

use serde::{Deserialize, Serialize};

use crate::encoder::{bidirectional_mask, transformer_layer, BlockConfig, EncoderConfig};
use crate::error::Result;
use crate::features::{ObjectRaw, OcrTokenRaw, PHOC_DIMS, WORD_EMBED_DIMS};
use crate::harness::data::Instance;
use crate::model::TextModel;
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape};

/// Encoder family being counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Joint transformer over every question/OCR/object slot.
    M4cStyle,
    /// Three attention blocks into six vectors, transformer over 6+N slots.
    SixVector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityQuery {
    pub model: ModelKind,
    pub l: u64,
    pub n: u64,
    pub m: u64,
    pub layers: u64,
    pub include_d: bool,
    pub d: u64,
}

impl ComplexityQuery {
    pub fn new(model: ModelKind, l: u64, n: u64, m: u64, layers: u64) -> Self {
        ComplexityQuery { model, l, n, m, layers, include_d: false, d: 1 }
    }
}

impl Default for ComplexityQuery {
    fn default() -> Self {
        // L = 20 question words, N = 50 OCR tokens, M = 100 objects
        ComplexityQuery::new(ModelKind::SixVector, 20, 50, 100, 8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub attention_block_ops: u64,
    pub transformer_per_layer_ops: u64,
    pub transformer_total_ops: u64,
    pub total_ops: u64,
}

/// Closed-form operation counts. Vector dimensions are omitted unless
/// `include_d` is set, in which case every term is multiplied by `d`.
///
/// - six_vector: attention blocks cost 2N + 2N + 2M (element-wise products
///   and the final weighted sum per block), the transformer sees 6+N slots,
///   so each layer costs (6+N)².
/// - m4c_style: no blocks, each layer costs (L+N+M)².
pub fn symbolic_count(q: &ComplexityQuery) -> ComplexityReport {
    let scale = if q.include_d { q.d } else { 1 };
    let (block, per_layer) = match q.model {
        ModelKind::M4cStyle => {
            let s = q.l + q.n + q.m;
            (0, s * s)
        }
        ModelKind::SixVector => {
            let block = 2 * q.n + 2 * q.n + 2 * q.m;
            let s = 6 + q.n;
            (block, s * s)
        }
    };
    let block = block * scale;
    let per_layer = per_layer * scale;
    let transformer_total = per_layer * q.layers;
    ComplexityReport {
        attention_block_ops: block,
        transformer_per_layer_ops: per_layer,
        transformer_total_ops: transformer_total,
        total_ops: block + transformer_total,
    }
}

/// Deterministic random instance with the requested slot counts, for the
/// empirical counter.
pub fn counting_instance(cfg: &EncoderConfig, l: usize, n: usize, m: usize, seed: u64) -> Instance {
    let mut rng = Rng::new(seed);
    let mut ocr = Vec::with_capacity(n);
    for i in 0..n {
        let x = rng.uniform_range(0.0, 0.5);
        let y = rng.uniform_range(0.0, 0.5);
        ocr.push(OcrTokenRaw {
            text: format!("tok{i}"),
            frcn: (0..cfg.d_frcn).map(|_| rng.normal()).collect(),
            bbox: vec![x, y, x + 0.2, y + 0.2],
            fasttext: (0..WORD_EMBED_DIMS).map(|_| rng.normal()).collect(),
            phoc: (0..PHOC_DIMS).map(|_| if rng.uniform() < 0.05 { 1.0 } else { 0.0 }).collect(),
            recog: (0..cfg.d_recog).map(|_| rng.normal()).collect(),
        });
    }
    let mut objects = Vec::with_capacity(m);
    for _ in 0..m {
        let x = rng.uniform_range(0.0, 0.5);
        let y = rng.uniform_range(0.0, 0.5);
        objects.push(ObjectRaw {
            frcn: (0..cfg.d_frcn).map(|_| rng.normal()).collect(),
            bbox: vec![x, y, x + 0.3, y + 0.3],
        });
    }
    Instance {
        id: "count".into(),
        question_tokens: (0..l).map(|i| 4 + (i % (cfg.vocab_size - 4))).collect(),
        ocr,
        objects,
        answers: vec!["count".into()],
    }
}

/// Config for empirical counting: exact slot budgets, requested layer
/// count (0 allowed — the transformer stage is simply skipped).
fn counting_cfg(d: usize, layers: usize, l: usize, n: usize, m: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers.max(1),
        num_heads: 1,
        d_model: d,
        d_ff: d,
        textcaps_mode: false,
        max_decode_steps: 2,
        vocab_size: 8,
        d_frcn: 4,
        d_recog: 2,
        d_glob: 2,
        l_max: l.max(1),
        n_max: n.max(1),
        m_max: m.max(1),
        blocks: BlockConfig::ThreeBlock,
    }
}

/// Exact multiply-add tally of the encoder forward pass (feature
/// preparation and question/guidance encoding excluded, matching the
/// closed-form scope): attention blocks plus the fusion transformer for
/// the six-vector encoder, the joint transformer alone for the m4c-style
/// encoder. Counted ops are those the tensor engine tallies: matrix and
/// vector products, element-wise products, scalings and layer-norm affine
/// work.
pub fn empirical_count(kind: ModelKind, d: usize, layers: usize, l: usize, n: usize, m: usize, seed: u64) -> Result<u64> {
    let cfg = counting_cfg(d, layers, l, n, m);
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let model = TextModel::new(&mut store, &mut rng, &cfg)?;
    let instance = counting_instance(&cfg, l, n, m, seed ^ 0x5eed);
    match kind {
        ModelKind::SixVector => {
            let mut tape = Tape::new();
            // run blocks always; run only `layers` transformer layers
            let sliced = TextModel {
                fusion_layers: model.fusion_layers[..layers.min(model.fusion_layers.len())].to_vec(),
                ..model.clone()
            };
            let pass = sliced.encode(&mut tape, &store, &instance)?;
            Ok(pass.counts.blocks + pass.counts.fusion)
        }
        ModelKind::M4cStyle => {
            let mut tape = Tape::new();
            // prepared features and encoded question (uncounted, as for
            // the six-vector path)
            let prep = crate::features::prepare(&mut tape, &store, &model.feat, &instance.ocr, &instance.objects, &cfg)?;
            let combined = tape.add(prep.ocr_visual, prep.ocr_linguistic)?;
            let active: Vec<bool> = vec![true; l]
                .into_iter()
                .chain(prep.ocr_mask.iter().copied())
                .chain(prep.obj_mask.iter().copied())
                .collect();
            let q_active = vec![true; l];
            let q = model
                .question
                .encode(&mut tape, &store, &instance.question_tokens, &q_active)?;
            let seq = tape.concat_rows(&[q, combined, prep.objects])?;
            let allowed = bidirectional_mask(&active);
            let before = tape.mul_adds();
            let mut x = seq;
            for layer in model.fusion_layers.iter().take(layers) {
                x = transformer_layer(&mut tape, &store, layer, x, &allowed, cfg.num_heads)?;
            }
            let _ = x;
            Ok(tape.mul_adds() - before)
        }
    }
}

/// Pretty text report for the CLI.
pub fn format_report(q: &ComplexityQuery, r: &ComplexityReport) -> String {
    let name = match q.model {
        ModelKind::M4cStyle => "m4c-style",
        ModelKind::SixVector => "six-vector",
    };
    format!(
        "model               {}\n\
         L / N / M           {} / {} / {}\n\
         layers              {}\n\
         attention block     {:>12}\n\
         transformer/layer   {:>12}\n\
         transformer total   {:>12}\n\
         total in encoder    {:>12}\n",
        name, q.l, q.n, q.m, q.layers,
        r.attention_block_ops, r.transformer_per_layer_ops, r.transformer_total_ops, r.total_ops
    )
}
