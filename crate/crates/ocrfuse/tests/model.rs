//! End-to-end model contracts: causal decoding equivalence, pad-slot
//! immunity, rigged-termination, full-model gradient checks in both modes,
//! and gradient flow through every attention parameter.

use ocrfuse::decoder::DecodingStep;
use ocrfuse::encoder::{BlockConfig, EncoderConfig};
use ocrfuse::features::{phoc_encode, stand_in_word_embedding};
use ocrfuse::harness::data::Instance;
use ocrfuse::features::{ObjectRaw, OcrTokenRaw};
use ocrfuse::model::TextModel;
use ocrfuse::objectives::LossConfig;
use ocrfuse::rng::Rng;
use ocrfuse::tensor::grad_check::{check_gradients, DEFAULT_EPS, DEFAULT_TOL};
use ocrfuse::tensor::{ParamStore, Tape};
use ocrfuse::vocab::Vocabulary;

fn toy_cfg() -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        num_heads: 2,
        d_model: 16,
        d_ff: 32,
        textcaps_mode: false,
        max_decode_steps: 6,
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

fn toy_vocab() -> Vocabulary {
    Vocabulary::new((0..12).map(|i| format!("w{i}")))
}

fn toy_token(rng: &mut Rng, cfg: &EncoderConfig, text: &str) -> OcrTokenRaw {
    OcrTokenRaw {
        text: text.to_string(),
        frcn: (0..cfg.d_frcn).map(|_| rng.normal()).collect(),
        bbox: {
            let x = rng.uniform_range(0.0, 0.5);
            let y = rng.uniform_range(0.0, 0.5);
            vec![x, y, x + 0.3, y + 0.3]
        },
        fasttext: stand_in_word_embedding(text),
        phoc: phoc_encode(text),
        recog: (0..cfg.d_recog).map(|_| rng.normal()).collect(),
    }
}

fn toy_object(rng: &mut Rng, cfg: &EncoderConfig) -> ObjectRaw {
    ObjectRaw {
        frcn: (0..cfg.d_frcn).map(|_| rng.normal()).collect(),
        bbox: {
            let x = rng.uniform_range(0.0, 0.5);
            let y = rng.uniform_range(0.0, 0.5);
            vec![x, y, x + 0.4, y + 0.4]
        },
    }
}

fn toy_instance(rng: &mut Rng, cfg: &EncoderConfig, caption_mode: bool) -> Instance {
    Instance {
        id: "toy0".into(),
        question_tokens: if caption_mode { vec![] } else { vec![4, 5, 6] },
        ocr: vec![
            toy_token(rng, cfg, "alpha"),
            toy_token(rng, cfg, "beta42"),
        ],
        objects: vec![toy_object(rng, cfg), toy_object(rng, cfg)],
        answers: vec!["w5 alpha".into()],
    }
}

fn build(seed: u64, cfg: &EncoderConfig) -> (TextModel, ParamStore, Instance) {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let model = TextModel::new(&mut store, &mut rng, cfg).unwrap();
    let instance = toy_instance(&mut rng, cfg, cfg.textcaps_mode);
    (model, store, instance)
}

#[test]
fn teacher_forced_scores_equal_step_by_step_rerun() {
    let cfg = toy_cfg();
    let (model, store, instance) = build(11, &cfg);
    let vocab = toy_vocab();
    let ocr_strings = instance.ocr_strings();
    let gt_steps = TextModel::gt_input_steps("w5 alpha", &vocab, &ocr_strings);
    assert_eq!(gt_steps.len(), 2);

    let mut tape = Tape::new();
    let pass = model.encode(&mut tape, &store, &instance).unwrap();
    let parallel = model
        .teacher_forced_scores(&mut tape, &store, &pass, &gt_steps)
        .unwrap();
    let parallel: Vec<Vec<f64>> = parallel.iter().map(|sv| tape.data(sv.scores).to_vec()).collect();

    // sequential rerun: score each prefix independently
    let mut sequential: Vec<Vec<f64>> = Vec::new();
    {
        let mut t = Tape::new();
        let pass = model.encode(&mut t, &store, &instance).unwrap();
        let head_w = t.param(&store, model.head.weight);
        let head_b = t.param(&store, model.head.bias);
        let sv0 = ocrfuse::decoder::score_step(
            &mut t,
            pass.context,
            pass.ocr_outputs,
            head_w,
            head_b,
            &pass.state.ocr_mask,
        )
        .unwrap();
        sequential.push(t.data(sv0.scores).to_vec());
    }
    for prefix_len in 1..=gt_steps.len() {
        let mut t = Tape::new();
        let pass = model.encode(&mut t, &store, &instance).unwrap();
        let head_w = t.param(&store, model.head.weight);
        let head_b = t.param(&store, model.head.bias);
        let k = pass.state.summaries.len();
        let n = pass.state.ocr_mask.len();
        let sv = model
            .decoder_step_scores(&mut t, &store, &pass, &gt_steps[..prefix_len], head_w, head_b, k, n)
            .unwrap();
        sequential.push(t.data(sv.scores).to_vec());
    }

    assert_eq!(parallel.len(), sequential.len());
    for (p, s) in parallel.iter().zip(&sequential) {
        for (a, b) in p.iter().zip(s) {
            assert!((a - b).abs() <= 1e-10, "parallel {a} vs sequential {b}");
        }
    }
}

#[test]
fn scores_at_step_t_ignore_later_decoder_inputs() {
    let cfg = toy_cfg();
    let (model, store, instance) = build(13, &cfg);
    let steps_a = vec![DecodingStep::Vocab(5), DecodingStep::Ocr(0), DecodingStep::Vocab(7)];
    let steps_b = vec![DecodingStep::Vocab(5), DecodingStep::Ocr(1), DecodingStep::Vocab(9)];

    let run = |steps: &[DecodingStep]| -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let pass = model.encode(&mut tape, &store, &instance).unwrap();
        let svs = model.teacher_forced_scores(&mut tape, &store, &pass, steps).unwrap();
        svs.iter().map(|sv| tape.data(sv.scores).to_vec()).collect()
    };
    let a = run(&steps_a);
    let b = run(&steps_b);
    // steps 0 and 1 are scored before the differing inputs can be seen
    assert_eq!(a[0], b[0]);
    assert_eq!(a[1], b[1]);
    assert_ne!(a[2], b[2], "step 2 must see the differing input at slot 1");
}

#[test]
fn pad_slots_are_inert_end_to_end() {
    // same parameters, same instance, different padded slot budget:
    // every populated-slot score is identical
    let cfg = toy_cfg();
    let (model, store, instance) = build(17, &cfg);
    let mut wide_cfg = cfg.clone();
    wide_cfg.n_max = 7;
    wide_cfg.m_max = 6;
    let wide = TextModel { cfg: wide_cfg, ..model.clone() };

    let score = |m: &TextModel| -> Vec<f64> {
        let mut tape = Tape::new();
        let pass = m.encode(&mut tape, &store, &instance).unwrap();
        let head_w = tape.param(&store, m.head.weight);
        let head_b = tape.param(&store, m.head.bias);
        let sv = ocrfuse::decoder::score_step(
            &mut tape,
            pass.context,
            pass.ocr_outputs,
            head_w,
            head_b,
            &pass.state.ocr_mask,
        )
        .unwrap();
        let vals = sv.masked_values(&tape);
        vals[..cfg.vocab_size + instance.ocr.len()].to_vec()
    };
    assert_eq!(score(&model), score(&wide));

    let decode = |m: &TextModel| m.decode_instance(&store, &instance, &toy_vocab()).unwrap();
    assert_eq!(decode(&model), decode(&wide));
}

#[test]
fn decode_terminates_by_budget_and_on_end_token() {
    let cfg = toy_cfg();
    let (model, mut store, instance) = build(19, &cfg);
    let vocab = toy_vocab();
    let w_star = vocab.index_of("w3").unwrap();

    // phase 1: zero head weights, bias favors w3 → no end token, budget stop
    {
        let p = store.get_mut(model.head.weight);
        p.value.data.iter_mut().for_each(|v| *v = 0.0);
    }
    {
        let p = store.get_mut(model.head.bias);
        p.value.data.iter_mut().for_each(|v| *v = 0.0);
        p.value.data[w_star] = 50.0;
    }
    let (_, steps) = model.decode_instance(&store, &instance, &vocab).unwrap();
    assert_eq!(steps.len(), cfg.max_decode_steps, "runs to the budget");
    assert!(steps.iter().all(|s| *s == DecodingStep::Vocab(w_star)));

    // phase 2: probe the decoder hidden state at slot 0 through the end-token
    // weight row, then point that row at the state → end dominates at step 2
    let d = cfg.d_model;
    let mut h = vec![0.0; d];
    for i in 0..d {
        {
            let p = store.get_mut(model.head.weight);
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
            p.value.data[ocrfuse::vocab::END * d + i] = 1.0;
        }
        let mut tape = Tape::new();
        let pass = model.encode(&mut tape, &store, &instance).unwrap();
        let head_w = tape.param(&store, model.head.weight);
        let head_b = tape.param(&store, model.head.bias);
        let k = pass.state.summaries.len();
        let n = pass.state.ocr_mask.len();
        let sv = model
            .decoder_step_scores(
                &mut tape,
                &store,
                &pass,
                &[DecodingStep::Vocab(w_star)],
                head_w,
                head_b,
                k,
                n,
            )
            .unwrap();
        h[i] = tape.data(sv.scores)[ocrfuse::vocab::END];
    }
    let norm2: f64 = h.iter().map(|v| v * v).sum();
    assert!(norm2 > 1e-9);
    {
        let p = store.get_mut(model.head.weight);
        p.value.data.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            p.value.data[ocrfuse::vocab::END * d + i] = 60.0 * h[i] / norm2;
        }
    }
    let (rendered, steps) = model.decode_instance(&store, &instance, &vocab).unwrap();
    assert_eq!(steps.len(), 1, "end dominates at step 2 → output length 1");
    assert_eq!(steps[0], DecodingStep::Vocab(w_star));
    assert_eq!(rendered, "w3");
}

#[test]
fn decoded_ocr_pointer_renders_verbatim() {
    let cfg = toy_cfg();
    let (model, mut store, instance) = build(23, &cfg);
    let vocab = toy_vocab();
    // verify the contract across a head-weight sweep: whenever a pointer is
    // decoded it renders the slot string verbatim
    for seed in 0..6u64 {
        let mut rng = Rng::new(900 + seed);
        let pw = store.get_mut(model.head.weight);
        for v in pw.value.data.iter_mut() {
            *v = 0.3 * rng.normal();
        }
        let (rendered, steps) = model.decode_instance(&store, &instance, &vocab).unwrap();
        let words: Vec<&str> = rendered.split(' ').collect();
        let strings = instance.ocr_strings();
        for (step, word) in steps.iter().zip(&words) {
            if let DecodingStep::Ocr(j) = step {
                assert_eq!(word, &strings[*j], "pointer must render the slot string verbatim");
            }
        }
    }
}

#[test]
fn full_textvqa_loss_gradients_match_finite_differences() {
    let cfg = toy_cfg();
    let vocab = toy_vocab();
    for seed in [0u64, 1] {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let model = TextModel::new(&mut store, &mut rng, &cfg).unwrap();
        let instance = toy_instance(&mut rng, &cfg, false);
        let loss_cfg = LossConfig { alpha: 1.0, pg_enabled: true };
        let report = check_gradients(&mut store, DEFAULT_EPS, Some(3), |tape, store| {
            let (loss, _, _) = model.forward_loss(tape, store, &instance, &vocab, &loss_cfg)?;
            Ok(loss)
        })
        .unwrap();
        assert!(
            report.passes(DEFAULT_TOL),
            "seed {seed}: rel err {} at {}[{}] (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst_param,
            report.worst_coord,
            report.analytic,
            report.numeric
        );
    }
}

#[test]
fn full_textcaps_loss_gradients_match_finite_differences() {
    let mut cfg = toy_cfg();
    cfg.textcaps_mode = true;
    cfg.max_decode_steps = 8;
    let vocab = toy_vocab();
    let mut rng = Rng::new(5);
    let mut store = ParamStore::new();
    let model = TextModel::new(&mut store, &mut rng, &cfg).unwrap();
    let mut instance = toy_instance(&mut rng, &cfg, true);
    instance.answers = vec!["w4 beta42 w6".into()];
    let loss_cfg = LossConfig::default();
    let report = check_gradients(&mut store, DEFAULT_EPS, Some(3), |tape, store| {
        let (loss, _, _) = model.forward_loss(tape, store, &instance, &vocab, &loss_cfg)?;
        Ok(loss)
    })
    .unwrap();
    assert!(
        report.passes(DEFAULT_TOL),
        "rel err {} at {}[{}]",
        report.max_rel_err,
        report.worst_param,
        report.worst_coord
    );
}

#[test]
fn every_attention_parameter_receives_gradient() {
    let cfg = toy_cfg();
    let (model, mut store, instance) = build(31, &cfg);
    let vocab = toy_vocab();
    store.zero_grad();
    let mut tape = Tape::new();
    let (loss, _, _) = model
        .forward_loss(&mut tape, &store, &instance, &vocab, &LossConfig::default())
        .unwrap();
    tape.backward(loss, &mut store).unwrap();
    for (_, p) in store.iter() {
        let is_attention = p.name.starts_with("selfattn.") || p.name.starts_with("block.");
        if is_attention {
            let g = p.value.grad.as_ref().unwrap();
            assert!(
                g.iter().any(|v| *v != 0.0),
                "{} received no gradient",
                p.name
            );
        }
    }
}

#[test]
fn lstm_parameters_receive_gradient_in_caption_mode() {
    let mut cfg = toy_cfg();
    cfg.textcaps_mode = true;
    let (model, mut store, instance) = build(37, &cfg);
    let _ = &model;
    let vocab = toy_vocab();
    store.zero_grad();
    let mut tape = Tape::new();
    let (loss, _, _) = model
        .forward_loss(&mut tape, &store, &instance, &vocab, &LossConfig::default())
        .unwrap();
    tape.backward(loss, &mut store).unwrap();
    for (_, p) in store.iter() {
        if p.name.starts_with("guide.lstm") && p.name.contains("w_ih") {
            let g = p.value.grad.as_ref().unwrap();
            assert!(g.iter().any(|v| *v != 0.0), "{} received no gradient", p.name);
        }
    }
}

#[test]
fn fusion_path_parameter_count_independent_of_l_and_m() {
    let count = |l_max: usize, m_max: usize| -> usize {
        let mut cfg = toy_cfg();
        cfg.l_max = l_max;
        cfg.m_max = m_max;
        let mut rng = Rng::new(41);
        let mut store = ParamStore::new();
        let _model = TextModel::new(&mut store, &mut rng, &cfg).unwrap();
        store
            .iter()
            .filter(|(_, p)| {
                p.name.starts_with("fusion.")
                    || p.name.starts_with("context.")
                    || p.name.starts_with("head.")
                    || p.name.starts_with("decoder.")
            })
            .map(|(_, p)| p.value.len())
            .sum()
    };
    let base = count(6, 4);
    assert_eq!(base, count(12, 16));
    assert_eq!(base, count(3, 2));
}

#[test]
fn block_variants_expose_expected_summary_counts() {
    for (blocks, want) in [
        (BlockConfig::OneBlock, 2usize),
        (BlockConfig::TwoBlock, 4),
        (BlockConfig::ThreeBlock, 6),
    ] {
        let mut cfg = toy_cfg();
        cfg.blocks = blocks;
        let (model, store, instance) = build(43, &cfg);
        let mut tape = Tape::new();
        let pass = model.encode(&mut tape, &store, &instance).unwrap();
        assert_eq!(pass.state.summaries.len(), want);
        assert_eq!(pass.fused_summaries.len(), want);
    }
}

#[test]
fn textcaps_mode_runs_end_to_end_with_long_budget() {
    let mut cfg = toy_cfg();
    cfg.textcaps_mode = true;
    cfg.max_decode_steps = 30;
    let (model, store, instance) = build(47, &cfg);
    let vocab = toy_vocab();
    let (rendered, steps) = model.decode_instance(&store, &instance, &vocab).unwrap();
    assert!(steps.len() <= 30);
    let _ = rendered;
    // training loss computes in caption mode too
    let mut tape = Tape::new();
    let (loss, _, _) = model
        .forward_loss(&mut tape, &store, &instance, &vocab, &LossConfig::default())
        .unwrap();
    assert!(tape.data(loss)[0].is_finite());
}
