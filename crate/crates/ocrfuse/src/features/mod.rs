//! Builds the projected feature sequences — OCR visual-part, OCR
//! linguistic-part, object features, optional global grids — from raw
//! per-instance records, plus the from-scratch question encoder.
//!
//! Pretrained extractors are out of scope here: appearance/recognition
//! vectors arrive as raw numbers in the instance records, the word
//! embedding slot is filled by a deterministic hashed stand-in, and the
//! character histogram is computed by a real PHOC encoder.

pub mod embedding;
pub mod phoc;

pub use embedding::{stand_in_word_embedding, WORD_EMBED_DIMS};
pub use phoc::{phoc_encode, PHOC_DIMS};

use serde::{Deserialize, Serialize};

use crate::encoder::{
    bidirectional_mask, transformer_layer, EncoderConfig, TransformerLayerParams, LN_EPS,
    QUESTION_LAYERS,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, TensorId};

/// Raw per-token OCR record: recognized string plus the five feature
/// vectors and the normalized box.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OcrTokenRaw {
    pub text: String,
    pub frcn: Vec<f64>,
    pub bbox: Vec<f64>,
    pub fasttext: Vec<f64>,
    pub phoc: Vec<f64>,
    pub recog: Vec<f64>,
}

impl OcrTokenRaw {
    pub fn validate(&self, d_frcn: usize, d_recog: usize) -> Result<()> {
        if self.frcn.len() != d_frcn {
            return Err(Error::Data(format!(
                "ocr token {:?}: frcn has {} dims, expected {d_frcn}",
                self.text,
                self.frcn.len()
            )));
        }
        if self.recog.len() != d_recog {
            return Err(Error::Data(format!(
                "ocr token {:?}: recog has {} dims, expected {d_recog}",
                self.text,
                self.recog.len()
            )));
        }
        if self.fasttext.len() != WORD_EMBED_DIMS {
            return Err(Error::Data(format!(
                "ocr token {:?}: fasttext has {} dims, expected {WORD_EMBED_DIMS}",
                self.text,
                self.fasttext.len()
            )));
        }
        if self.phoc.len() != PHOC_DIMS {
            return Err(Error::Data(format!(
                "ocr token {:?}: phoc has {} dims, expected {PHOC_DIMS}",
                self.text,
                self.phoc.len()
            )));
        }
        if self.phoc.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Data(format!("ocr token {:?}: phoc entries must be 0/1", self.text)));
        }
        validate_bbox(&self.bbox, &self.text)?;
        for v in self.frcn.iter().chain(&self.fasttext).chain(&self.recog) {
            if !v.is_finite() {
                return Err(Error::Data(format!("ocr token {:?}: non-finite feature", self.text)));
            }
        }
        Ok(())
    }
}

/// Raw detected-object record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectRaw {
    pub frcn: Vec<f64>,
    pub bbox: Vec<f64>,
}

impl ObjectRaw {
    pub fn validate(&self, d_frcn: usize) -> Result<()> {
        if self.frcn.len() != d_frcn {
            return Err(Error::Data(format!(
                "object: frcn has {} dims, expected {d_frcn}",
                self.frcn.len()
            )));
        }
        if self.frcn.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("object: non-finite feature".into()));
        }
        validate_bbox(&self.bbox, "object")
    }
}

fn validate_bbox(bbox: &[f64], what: &str) -> Result<()> {
    if bbox.len() != 4 {
        return Err(Error::Data(format!("{what}: bbox must have 4 entries")));
    }
    if bbox.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::Data(format!("{what}: bbox entries must be in [0,1]")));
    }
    if bbox[0] > bbox[2] || bbox[1] > bbox[3] {
        return Err(Error::Data(format!(
            "{what}: bbox corners out of order (top-left then bottom-right)"
        )));
    }
    Ok(())
}

/// Projection parameters for all feature branches. The recognition-feature
/// projection is shared between the OCR visual and linguistic parts.
#[derive(Debug, Clone)]
pub struct FeatureParams {
    // OCR visual part
    pub w_fr: ParamId,
    pub w_rg: ParamId,
    pub ln_fr_g: ParamId,
    pub ln_fr_b: ParamId,
    pub w_bx: ParamId,
    pub ln_bx_g: ParamId,
    pub ln_bx_b: ParamId,
    // OCR linguistic part
    pub w_ft: ParamId,
    pub w_ph: ParamId,
    pub ln_lg_g: ParamId,
    pub ln_lg_b: ParamId,
    // merged single-block variant (content term; bbox term reuses w_bx/ln_bx)
    pub ln_merged_g: ParamId,
    pub ln_merged_b: ParamId,
    // objects (independent from OCR projections)
    pub w_obj_fr: ParamId,
    pub ln_obj_fr_g: ParamId,
    pub ln_obj_fr_b: ParamId,
    pub w_obj_bx: ParamId,
    pub ln_obj_bx_g: ParamId,
    pub ln_obj_bx_b: ParamId,
    // global grids
    pub w_glob: ParamId,
    pub ln_glob_g: ParamId,
    pub ln_glob_b: ParamId,
}

impl FeatureParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        FeatureParams {
            w_fr: store.add_linear("feat.ocr.w_fr", cfg.d_frcn, d, rng),
            w_rg: store.add_linear("feat.ocr.w_rg", cfg.d_recog, d, rng),
            ln_fr_g: store.add_ones("feat.ocr.ln_fr.g", vec![d]),
            ln_fr_b: store.add_zeros("feat.ocr.ln_fr.b", vec![d]),
            w_bx: store.add_linear("feat.ocr.w_bx", 4, d, rng),
            ln_bx_g: store.add_ones("feat.ocr.ln_bx.g", vec![d]),
            ln_bx_b: store.add_zeros("feat.ocr.ln_bx.b", vec![d]),
            w_ft: store.add_linear("feat.ocr.w_ft", WORD_EMBED_DIMS, d, rng),
            w_ph: store.add_linear("feat.ocr.w_ph", PHOC_DIMS, d, rng),
            ln_lg_g: store.add_ones("feat.ocr.ln_lg.g", vec![d]),
            ln_lg_b: store.add_zeros("feat.ocr.ln_lg.b", vec![d]),
            ln_merged_g: store.add_ones("feat.ocr.ln_merged.g", vec![d]),
            ln_merged_b: store.add_zeros("feat.ocr.ln_merged.b", vec![d]),
            w_obj_fr: store.add_linear("feat.obj.w_fr", cfg.d_frcn, d, rng),
            ln_obj_fr_g: store.add_ones("feat.obj.ln_fr.g", vec![d]),
            ln_obj_fr_b: store.add_zeros("feat.obj.ln_fr.b", vec![d]),
            w_obj_bx: store.add_linear("feat.obj.w_bx", 4, d, rng),
            ln_obj_bx_g: store.add_ones("feat.obj.ln_bx.g", vec![d]),
            ln_obj_bx_b: store.add_zeros("feat.obj.ln_bx.b", vec![d]),
            w_glob: store.add_linear("feat.glob.w", cfg.d_glob, d, rng),
            ln_glob_g: store.add_ones("feat.glob.ln.g", vec![d]),
            ln_glob_b: store.add_zeros("feat.glob.ln.b", vec![d]),
        }
    }
}

/// LN(W_fr·frcn + W_rg·recog) + LN(W_bx·bbox).
pub fn ocr_visual_part(
    tape: &mut Tape,
    store: &ParamStore,
    fp: &FeatureParams,
    tok: &OcrTokenRaw,
) -> Result<TensorId> {
    let frcn = tape.constant_vec(tok.frcn.clone());
    let recog = tape.constant_vec(tok.recog.clone());
    let bbox = tape.constant_vec(tok.bbox.clone());
    let w_fr = tape.param(store, fp.w_fr);
    let w_rg = tape.param(store, fp.w_rg);
    let w_bx = tape.param(store, fp.w_bx);
    let a = tape.vec_mat(frcn, w_fr)?;
    let b = tape.vec_mat(recog, w_rg)?;
    let content = tape.add(a, b)?;
    let g1 = tape.param(store, fp.ln_fr_g);
    let b1 = tape.param(store, fp.ln_fr_b);
    let content = tape.layer_norm(content, g1, b1, LN_EPS)?;
    let spatial = tape.vec_mat(bbox, w_bx)?;
    let g2 = tape.param(store, fp.ln_bx_g);
    let b2 = tape.param(store, fp.ln_bx_b);
    let spatial = tape.layer_norm(spatial, g2, b2, LN_EPS)?;
    tape.add(content, spatial)
}

/// LN(W_ft·fasttext + W_ph·phoc + W_rg·recog).
pub fn ocr_linguistic_part(
    tape: &mut Tape,
    store: &ParamStore,
    fp: &FeatureParams,
    tok: &OcrTokenRaw,
) -> Result<TensorId> {
    let ft = tape.constant_vec(tok.fasttext.clone());
    let ph = tape.constant_vec(tok.phoc.clone());
    let rg = tape.constant_vec(tok.recog.clone());
    let w_ft = tape.param(store, fp.w_ft);
    let w_ph = tape.param(store, fp.w_ph);
    let w_rg = tape.param(store, fp.w_rg);
    let a = tape.vec_mat(ft, w_ft)?;
    let b = tape.vec_mat(ph, w_ph)?;
    let c = tape.vec_mat(rg, w_rg)?;
    let s = tape.add(a, b)?;
    let s = tape.add(s, c)?;
    let g = tape.param(store, fp.ln_lg_g);
    let bias = tape.param(store, fp.ln_lg_b);
    tape.layer_norm(s, g, bias, LN_EPS)
}

/// Single-block variant: the whole feature set — appearance, recognition,
/// word embedding, character histogram and box — through one normalized
/// sum, since a single block summarizes everything at once.
pub fn ocr_merged_part(
    tape: &mut Tape,
    store: &ParamStore,
    fp: &FeatureParams,
    tok: &OcrTokenRaw,
) -> Result<TensorId> {
    let frcn = tape.constant_vec(tok.frcn.clone());
    let rg = tape.constant_vec(tok.recog.clone());
    let ft = tape.constant_vec(tok.fasttext.clone());
    let ph = tape.constant_vec(tok.phoc.clone());
    let bbox = tape.constant_vec(tok.bbox.clone());
    let w_fr = tape.param(store, fp.w_fr);
    let w_rg = tape.param(store, fp.w_rg);
    let w_ft = tape.param(store, fp.w_ft);
    let w_ph = tape.param(store, fp.w_ph);
    let w_bx = tape.param(store, fp.w_bx);
    let mut sum = tape.vec_mat(frcn, w_fr)?;
    for term in [
        tape.vec_mat(rg, w_rg)?,
        tape.vec_mat(ft, w_ft)?,
        tape.vec_mat(ph, w_ph)?,
        tape.vec_mat(bbox, w_bx)?,
    ] {
        sum = tape.add(sum, term)?;
    }
    let g = tape.param(store, fp.ln_merged_g);
    let b = tape.param(store, fp.ln_merged_b);
    tape.layer_norm(sum, g, b, LN_EPS)
}

/// LN(W'_fr·frcn) + LN(W'_bx·bbox) with object-specific parameters.
pub fn object_embed(
    tape: &mut Tape,
    store: &ParamStore,
    fp: &FeatureParams,
    obj: &ObjectRaw,
) -> Result<TensorId> {
    let frcn = tape.constant_vec(obj.frcn.clone());
    let bbox = tape.constant_vec(obj.bbox.clone());
    let w_fr = tape.param(store, fp.w_obj_fr);
    let w_bx = tape.param(store, fp.w_obj_bx);
    let a = tape.vec_mat(frcn, w_fr)?;
    let g1 = tape.param(store, fp.ln_obj_fr_g);
    let b1 = tape.param(store, fp.ln_obj_fr_b);
    let a = tape.layer_norm(a, g1, b1, LN_EPS)?;
    let b = tape.vec_mat(bbox, w_bx)?;
    let g2 = tape.param(store, fp.ln_obj_bx_g);
    let b2 = tape.param(store, fp.ln_obj_bx_b);
    let b = tape.layer_norm(b, g2, b2, LN_EPS)?;
    tape.add(a, b)
}

/// Row-wise LN(W_g·x) over a grid of global features (alternative third
/// branch input).
pub fn global_grid_embed(
    tape: &mut Tape,
    store: &ParamStore,
    fp: &FeatureParams,
    grid: TensorId,
) -> Result<TensorId> {
    let w = tape.param(store, fp.w_glob);
    let h = tape.matmul(grid, w)?;
    let g = tape.param(store, fp.ln_glob_g);
    let b = tape.param(store, fp.ln_glob_b);
    tape.layer_norm(h, g, b, LN_EPS)
}

/// Projected d_model sequences with pad masks; padded rows are exactly
/// zero and masks mark the populated positions.
#[derive(Debug, Clone)]
pub struct PreparedFeatures {
    pub ocr_visual: TensorId,
    pub ocr_linguistic: TensorId,
    pub objects: TensorId,
    pub ocr_mask: Vec<bool>,
    pub obj_mask: Vec<bool>,
}

fn stack_padded(
    tape: &mut Tape,
    rows: Vec<TensorId>,
    n_max: usize,
    d: usize,
) -> Result<TensorId> {
    let mut all = rows;
    while all.len() < n_max {
        all.push(tape.constant_vec(vec![0.0; d]));
    }
    tape.stack_rows(&all)
}

/// Projects raw OCR and object records into the three padded sequences.
pub fn prepare(
    tape: &mut Tape,
    store: &ParamStore,
    fp: &FeatureParams,
    ocr: &[OcrTokenRaw],
    objects: &[ObjectRaw],
    cfg: &EncoderConfig,
) -> Result<PreparedFeatures> {
    if ocr.len() > cfg.n_max {
        return Err(Error::Data(format!(
            "{} ocr tokens exceed n_max {}",
            ocr.len(),
            cfg.n_max
        )));
    }
    if objects.len() > cfg.m_max {
        return Err(Error::Data(format!(
            "{} objects exceed m_max {}",
            objects.len(),
            cfg.m_max
        )));
    }
    let d = cfg.d_model;
    let mut vis = Vec::with_capacity(ocr.len());
    let mut lin = Vec::with_capacity(ocr.len());
    for tok in ocr {
        vis.push(ocr_visual_part(tape, store, fp, tok)?);
        lin.push(ocr_linguistic_part(tape, store, fp, tok)?);
    }
    let mut objs = Vec::with_capacity(objects.len());
    for o in objects {
        objs.push(object_embed(tape, store, fp, o)?);
    }
    let mut ocr_mask = vec![true; ocr.len()];
    ocr_mask.resize(cfg.n_max, false);
    let mut obj_mask = vec![true; objects.len()];
    obj_mask.resize(cfg.m_max, false);
    Ok(PreparedFeatures {
        ocr_visual: stack_padded(tape, vis, cfg.n_max, d)?,
        ocr_linguistic: stack_padded(tape, lin, cfg.n_max, d)?,
        objects: stack_padded(tape, objs, cfg.m_max, d)?,
        ocr_mask,
        obj_mask,
    })
}

/// Merged single-sequence variant for the one-block ablation.
pub fn prepare_merged(
    tape: &mut Tape,
    store: &ParamStore,
    fp: &FeatureParams,
    ocr: &[OcrTokenRaw],
    cfg: &EncoderConfig,
) -> Result<(TensorId, Vec<bool>)> {
    if ocr.len() > cfg.n_max {
        return Err(Error::Data(format!(
            "{} ocr tokens exceed n_max {}",
            ocr.len(),
            cfg.n_max
        )));
    }
    let mut rows = Vec::with_capacity(ocr.len());
    for tok in ocr {
        rows.push(ocr_merged_part(tape, store, fp, tok)?);
    }
    let mut mask = vec![true; ocr.len()];
    mask.resize(cfg.n_max, false);
    Ok((stack_padded(tape, rows, cfg.n_max, cfg.d_model)?, mask))
}

/// Learned token + position embeddings followed by a three-layer
/// transformer encoder, trained from scratch.
#[derive(Debug, Clone)]
pub struct QuestionEncoder {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<TransformerLayerParams>,
    pub num_heads: usize,
    pub l_max: usize,
}

impl QuestionEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &EncoderConfig) -> Self {
        let layers = (0..QUESTION_LAYERS)
            .map(|i| TransformerLayerParams::new(store, rng, &format!("question.layer{i}"), cfg.d_model, cfg.d_ff))
            .collect();
        QuestionEncoder {
            tok_emb: store.add_embedding("question.tok_emb", cfg.vocab_size, cfg.d_model, rng),
            pos_emb: store.add_embedding("question.pos_emb", cfg.l_max, cfg.d_model, rng),
            layers,
            num_heads: cfg.num_heads,
            l_max: cfg.l_max,
        }
    }

    /// Encodes `ids` (with `active[i]` false on pad positions) into
    /// [L × d_model]. Pad rows never influence active rows.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        active: &[bool],
    ) -> Result<TensorId> {
        assert_eq!(ids.len(), active.len());
        if ids.is_empty() || ids.len() > self.l_max {
            return Err(Error::Data(format!(
                "question length {} outside 1..={}",
                ids.len(),
                self.l_max
            )));
        }
        if !active.iter().any(|&a| a) {
            return Err(Error::DegenerateMask { row: 0 });
        }
        let tok = tape.param(store, self.tok_emb);
        let pos = tape.param(store, self.pos_emb);
        let toks = tape.embedding_lookup(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let poss = tape.embedding_lookup(pos, &positions)?;
        let mut x = tape.add(toks, poss)?;
        let allowed = bidirectional_mask(active);
        for layer in &self.layers {
            x = transformer_layer(tape, store, layer, x, &allowed, self.num_heads)?;
        }
        Ok(x)
    }
}
