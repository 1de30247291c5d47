//! Finite-difference verification suite: every tensor primitive plus the
//! full model loss in both modes, on a small model. Backs the `grad-check`
//! CLI command and the acceptance run.

use serde::Serialize;

use crate::encoder::{BlockConfig, EncoderConfig};
use crate::features::{phoc_encode, stand_in_word_embedding, ObjectRaw, OcrTokenRaw};
use crate::harness::data::Instance;
use crate::model::TextModel;
use crate::objectives::LossConfig;
use crate::rng::Rng;
use crate::tensor::grad_check::{check_gradients, GradCheckReport, DEFAULT_EPS, DEFAULT_TOL};
use crate::tensor::{ParamId, ParamStore, Tape, TensorId, TensorValue};
use crate::vocab::Vocabulary;
use crate::Result;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
    pub pass: bool,
}

impl CheckResult {
    fn from_report(name: &str, report: &GradCheckReport) -> Self {
        CheckResult {
            name: name.to_string(),
            max_rel_err: report.max_rel_err,
            coords: report.coords_checked,
            pass: report.passes(DEFAULT_TOL),
        }
    }
}

fn rand_param(store: &mut ParamStore, name: &str, shape: Vec<usize>, rng: &mut Rng) -> ParamId {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    store.add(name, TensorValue::new(shape, data, true))
}

/// Weighted mean so gradients are non-uniform across coordinates.
fn weighted_scalar(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let n = tape.value(x).len();
    let shape = tape.shape(x).to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.05 * (i as f64 + 1.0) - 0.4).collect();
    let w = tape.constant(shape, w);
    let p = tape.mul(x, w)?;
    Ok(tape.mean_all(p))
}

type CheckFn = fn(&mut Tape, &ParamStore) -> Result<TensorId>;
type SetupFn = fn(&mut ParamStore, &mut Rng) -> Vec<ParamId>;

fn primitive_checks() -> Vec<(&'static str, SetupFn, CheckFn)> {
    vec![
        (
            "matmul",
            |s, r| vec![rand_param(s, "a", vec![4, 5], r), rand_param(s, "b", vec![5, 3], r)],
            |t, s| {
                let a = t.param(s, ParamId(0));
                let b = t.param(s, ParamId(1));
                let c = t.matmul(a, b)?;
                weighted_scalar(t, c)
            },
        ),
        (
            "vec_mat mat_vec transpose",
            |s, r| vec![rand_param(s, "v", vec![4], r), rand_param(s, "m", vec![4, 3], r)],
            |t, s| {
                let v = t.param(s, ParamId(0));
                let m = t.param(s, ParamId(1));
                let a = t.vec_mat(v, m)?;
                let mt = t.transpose(m)?;
                let b = t.mat_vec(mt, v)?;
                let joined = t.concat_cols(&[a, b])?;
                weighted_scalar(t, joined)
            },
        ),
        (
            "softmax_masked",
            |s, r| vec![rand_param(s, "x", vec![3, 5], r)],
            |t, s| {
                let x = t.param(s, ParamId(0));
                let y = t.softmax_masked(x, &[true, true, false, true, true])?;
                weighted_scalar(t, y)
            },
        ),
        (
            "layer_norm",
            |s, r| {
                vec![
                    rand_param(s, "x", vec![3, 6], r),
                    rand_param(s, "g", vec![6], r),
                    rand_param(s, "b", vec![6], r),
                ]
            },
            |t, s| {
                let x = t.param(s, ParamId(0));
                let g = t.param(s, ParamId(1));
                let b = t.param(s, ParamId(2));
                let y = t.layer_norm(x, g, b, 1e-5)?;
                weighted_scalar(t, y)
            },
        ),
        (
            "relu sigmoid tanh",
            |s, r| vec![rand_param(s, "x", vec![2, 6], r)],
            |t, s| {
                let x = t.param(s, ParamId(0));
                // keep relu inputs away from the kink
                let shift = t.constant(vec![2, 6], vec![0.25; 12]);
                let x = t.add(x, shift)?;
                let a = t.relu(x);
                let b = t.sigmoid(a);
                let c = t.tanh(b);
                weighted_scalar(t, c)
            },
        ),
        (
            "log",
            |s, r| vec![rand_param(s, "x", vec![6], r)],
            |t, s| {
                let x = t.param(s, ParamId(0));
                let sq = t.mul(x, x)?;
                let shift = t.constant_vec(vec![0.5; 6]);
                let pos = t.add(sq, shift)?;
                let y = t.log(pos);
                weighted_scalar(t, y)
            },
        ),
        (
            "mul add broadcast scale",
            |s, r| {
                vec![
                    rand_param(s, "a", vec![3, 4], r),
                    rand_param(s, "b", vec![3, 4], r),
                    rand_param(s, "bias", vec![4], r),
                ]
            },
            |t, s| {
                let a = t.param(s, ParamId(0));
                let b = t.param(s, ParamId(1));
                let bias = t.param(s, ParamId(2));
                let p = t.mul(a, b)?;
                let q = t.add(p, a)?;
                let q = t.add_row_broadcast(q, bias)?;
                let q = t.scale(q, 0.7);
                weighted_scalar(t, q)
            },
        ),
        (
            "concat stack slice select",
            |s, r| vec![rand_param(s, "a", vec![4], r), rand_param(s, "b", vec![2, 4], r)],
            |t, s| {
                let a = t.param(s, ParamId(0));
                let b = t.param(s, ParamId(1));
                let stacked = t.stack_rows(&[a, a])?;
                let big = t.concat_rows(&[stacked, b])?;
                let row = t.select_row(big, 2)?;
                let head = t.slice_cols(row, 1, 3)?;
                let tail = t.slice_rows(big, 1, 2)?;
                let flat = t.select_row(tail, 0)?;
                let joined = t.concat_cols(&[head, flat])?;
                weighted_scalar(t, joined)
            },
        ),
        (
            "sum_reduce embedding_lookup",
            |s, r| vec![rand_param(s, "table", vec![5, 3], r)],
            |t, s| {
                let table = t.param(s, ParamId(0));
                let rows = t.embedding_lookup(table, &[4, 0, 2, 0])?;
                let total = t.sum_reduce(rows);
                let w = t.mul(total, total)?;
                Ok(t.scale(w, 0.5))
            },
        ),
        (
            "bce_with_logits",
            |s, r| vec![rand_param(s, "scores", vec![8], r)],
            |t, s| {
                let x = t.param(s, ParamId(0));
                let targets = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
                let mask = [true, true, true, true, true, true, false, false];
                let per = t.bce_with_logits(x, &targets, &mask)?;
                Ok(t.mean_all(per))
            },
        ),
    ]
}

/// Gradient-check toy config: d_model 16, N = 4, M = 4, L = 3, one layer.
pub fn toy_config(textcaps: bool) -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        num_heads: 2,
        d_model: 16,
        d_ff: 32,
        textcaps_mode: textcaps,
        max_decode_steps: if textcaps { 8 } else { 6 },
        vocab_size: 16,
        d_frcn: 8,
        d_recog: 4,
        d_glob: 8,
        l_max: 6,
        n_max: 4,
        m_max: 4,
        blocks: BlockConfig::ThreeBlock,
    }
}

fn toy_instance(rng: &mut Rng, cfg: &EncoderConfig, textcaps: bool) -> Instance {
    let token = |rng: &mut Rng, text: &str| OcrTokenRaw {
        text: text.to_string(),
        frcn: (0..cfg.d_frcn).map(|_| rng.normal()).collect(),
        bbox: {
            let x = rng.uniform_range(0.0, 0.4);
            let y = rng.uniform_range(0.0, 0.4);
            vec![x, y, x + 0.3, y + 0.3]
        },
        fasttext: stand_in_word_embedding(text),
        phoc: phoc_encode(text),
        recog: (0..cfg.d_recog).map(|_| rng.normal()).collect(),
    };
    Instance {
        id: "gradcheck".into(),
        question_tokens: if textcaps { vec![] } else { vec![4, 7, 9] },
        ocr: vec![token(rng, "kxt"), token(rng, "vbnm"), token(rng, "wrd")],
        objects: vec![
            ObjectRaw {
                frcn: (0..cfg.d_frcn).map(|_| rng.normal()).collect(),
                bbox: vec![0.1, 0.2, 0.6, 0.7],
            },
            ObjectRaw {
                frcn: (0..cfg.d_frcn).map(|_| rng.normal()).collect(),
                bbox: vec![0.3, 0.1, 0.8, 0.5],
            },
        ],
        answers: vec!["w5 vbnm".into()],
    }
}

/// Full-model loss check on the toy model; `max_coords` bounds the
/// per-parameter sweep (None = every coordinate).
pub fn full_model_check(seed: u64, textcaps: bool, max_coords: Option<usize>) -> Result<CheckResult> {
    let cfg = toy_config(textcaps);
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let model = TextModel::new(&mut store, &mut rng, &cfg)?;
    let instance = toy_instance(&mut rng, &cfg, textcaps);
    let vocab = Vocabulary::new((0..cfg.vocab_size - 4).map(|i| format!("w{i}")));
    let loss_cfg = LossConfig::default();
    let report = check_gradients(&mut store, DEFAULT_EPS, max_coords, |tape, store| {
        let (loss, _, _) = model.forward_loss(tape, store, &instance, &vocab, &loss_cfg)?;
        Ok(loss)
    })?;
    let name = if textcaps { "full loss (caption mode)" } else { "full loss (qa mode)" };
    Ok(CheckResult::from_report(name, &report))
}

/// Runs every primitive check and both full-model checks for one seed.
pub fn run_grad_checks(seed: u64, max_coords: Option<usize>) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for (name, setup, loss_fn) in primitive_checks() {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        setup(&mut store, &mut rng);
        let report = check_gradients(&mut store, DEFAULT_EPS, None, loss_fn)?;
        results.push(CheckResult::from_report(name, &report));
    }
    results.push(full_model_check(seed, false, max_coords)?);
    results.push(full_model_check(seed, true, max_coords)?);
    Ok(results)
}
