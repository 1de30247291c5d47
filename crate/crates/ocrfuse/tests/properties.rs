//! Property tests: attention-block invariants, masked-softmax weight
//! normalization, pad-slot immunity, metric laws, and the target/render
//! round trip.

use proptest::prelude::*;

use ocrfuse::attention::AttentionBlockParams;
use ocrfuse::decoder::{render, DecodingStep};
use ocrfuse::encoder::{bidirectional_mask, transformer_layer, TransformerLayerParams};
use ocrfuse::objectives::{anls, build_targets, edit_distance};
use ocrfuse::rng::Rng;
use ocrfuse::tensor::{ParamStore, Tape};
use ocrfuse::vocab::{Vocabulary, END};

const D: usize = 6;

fn block_fixture(seed: u64) -> (AttentionBlockParams, ParamStore) {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let block = AttentionBlockParams::new(&mut store, &mut rng, "blk", D, D);
    (block, store)
}

fn random_rows(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = Rng::new(seed ^ 0x9e37);
    (0..n * D).map(|_| rng.normal()).collect()
}

fn random_query(seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed ^ 0x51a5);
    (0..D).map(|_| rng.normal()).collect()
}

/// mask with at least one active slot
fn mask_strategy(n: usize) -> impl Strategy<Value = Vec<bool>> {
    proptest::collection::vec(any::<bool>(), n).prop_map(move |mut m| {
        if !m.iter().any(|&b| b) {
            m[0] = true;
        }
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn attention_block_permutation_invariant(
        seed in 0u64..1000,
        perm_seed in 0u64..1000,
        (n, mask) in (2usize..8).prop_flat_map(|n| (Just(n), mask_strategy(n))),
    ) {
        let mask = &mask[..n];
        let (block, store) = block_fixture(seed);
        let feats = random_rows(seed, n);
        let query = random_query(seed);

        let mut tape = Tape::new();
        let q = tape.constant_vec(query.clone());
        let f = tape.constant(vec![n, D], feats.clone());
        let g1 = block.apply(&mut tape, &store, q, f, mask).unwrap();
        let g1 = tape.data(g1).to_vec();

        let mut perm: Vec<usize> = (0..n).collect();
        let mut prng = Rng::new(perm_seed);
        prng.shuffle(&mut perm);
        let mut pfeats = vec![0.0; n * D];
        let mut pmask = vec![false; n];
        for (new_i, &old_i) in perm.iter().enumerate() {
            pfeats[new_i * D..(new_i + 1) * D].copy_from_slice(&feats[old_i * D..(old_i + 1) * D]);
            pmask[new_i] = mask[old_i];
        }
        let mut tape2 = Tape::new();
        let q2 = tape2.constant_vec(query);
        let f2 = tape2.constant(vec![n, D], pfeats);
        let g2 = block.apply(&mut tape2, &store, q2, f2, &pmask).unwrap();
        let g2 = tape2.data(g2).to_vec();
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_block_single_element_identity(seed in 0u64..1000) {
        let (block, store) = block_fixture(seed);
        let feats = random_rows(seed, 1);
        let mut tape = Tape::new();
        let q = tape.constant_vec(random_query(seed));
        let f = tape.constant(vec![1, D], feats.clone());
        let g = block.apply(&mut tape, &store, q, f, &[true]).unwrap();
        for (a, b) in tape.data(g).iter().zip(&feats) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_weights_are_convex_and_g_is_their_combination(
        seed in 0u64..1000,
        scale in 0.1f64..10.0,
        (n, mask) in (1usize..8).prop_flat_map(|n| (Just(n), mask_strategy(n))),
    ) {
        let mask = &mask[..n];
        let (block, store) = block_fixture(seed);
        let feats = random_rows(seed, n);
        let mut query = random_query(seed);
        // positive rescaling of the query changes weights but must keep the
        // output a convex combination of the rows
        for v in query.iter_mut() {
            *v *= scale;
        }
        let mut tape = Tape::new();
        let q = tape.constant_vec(query);
        let f = tape.constant(vec![n, D], feats.clone());
        let w = block.weights(&mut tape, &store, q, f, mask).unwrap();
        let wv = tape.data(w).to_vec();
        let mut sum = 0.0;
        for (i, &wi) in wv.iter().enumerate() {
            if mask[i] {
                prop_assert!(wi >= 0.0);
                sum += wi;
            } else {
                prop_assert_eq!(wi, 0.0, "masked slots get exactly zero weight");
            }
        }
        prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {sum}");

        let g = block.apply(&mut tape, &store, q, f, mask).unwrap();
        for j in 0..D {
            let combo: f64 = (0..n).map(|i| wv[i] * feats[i * D + j]).sum();
            prop_assert!((tape.data(g)[j] - combo).abs() <= 1e-12);
        }
    }

    #[test]
    fn pad_slots_cannot_influence_active_rows(
        seed in 0u64..500,
        pad_fill in -50.0f64..50.0,
        (n, mask) in (2usize..7).prop_flat_map(|n| (Just(n), mask_strategy(n))),
    ) {
        let mask = &mask[..n];
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let params = TransformerLayerParams::new(&mut store, &mut rng, "l0", D, 2 * D);
        let mut data = random_rows(seed, n);
        let allowed = bidirectional_mask(mask);

        let mut tape = Tape::new();
        let seq = tape.constant(vec![n, D], data.clone());
        let out1 = transformer_layer(&mut tape, &store, &params, seq, &allowed, 2).unwrap();
        let out1 = tape.data(out1).to_vec();

        for (i, &active) in mask.iter().enumerate() {
            if !active {
                for v in &mut data[i * D..(i + 1) * D] {
                    *v = pad_fill;
                }
            }
        }
        let mut tape2 = Tape::new();
        let seq2 = tape2.constant(vec![n, D], data);
        let out2 = transformer_layer(&mut tape2, &store, &params, seq2, &allowed, 2).unwrap();
        let out2 = tape2.data(out2).to_vec();
        for (i, &active) in mask.iter().enumerate() {
            if active {
                prop_assert_eq!(&out1[i * D..(i + 1) * D], &out2[i * D..(i + 1) * D]);
            }
        }
    }

    #[test]
    fn masked_softmax_rows_normalize(
        seed in 0u64..1000,
        rows in 1usize..5,
        mask in (1usize..8).prop_flat_map(mask_strategy),
    ) {
        let cols = mask.len();
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| 5.0 * rng.normal()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(vec![rows, cols], data);
        let y = tape.softmax_masked(x, &mask).unwrap();
        for r in 0..rows {
            let row = &tape.data(y)[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if mask[j] {
                    prop_assert!(v > 0.0);
                    sum += v;
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn anls_laws_and_oracle_agreement(
        a in "[a-z0-9 ]{0,20}",
        b in "[a-z0-9 ]{0,20}",
    ) {
        // independent recursive-memo distance oracle
        fn rec(a: &[char], b: &[char], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
            if i == a.len() {
                return b.len() - j;
            }
            if j == b.len() {
                return a.len() - i;
            }
            if let Some(v) = memo[i][j] {
                return v;
            }
            let v = if a[i] == b[j] {
                rec(a, b, i + 1, j + 1, memo)
            } else {
                1 + rec(a, b, i + 1, j, memo)
                    .min(rec(a, b, i, j + 1, memo))
                    .min(rec(a, b, i + 1, j + 1, memo))
            };
            memo[i][j] = Some(v);
            v
        }
        let ta = a.trim().to_lowercase();
        let tb = b.trim().to_lowercase();
        let ca: Vec<char> = ta.chars().collect();
        let cb: Vec<char> = tb.chars().collect();
        let mut memo = vec![vec![None; cb.len() + 1]; ca.len() + 1];
        let d = rec(&ca, &cb, 0, 0, &mut memo);
        prop_assert_eq!(edit_distance(&ta, &tb), d);

        let v = anls(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, anls(&b, &a), "symmetry");
        prop_assert_eq!(anls(&a, &a), 1.0);
        let expect = if ca.is_empty() && cb.is_empty() {
            1.0
        } else {
            1.0 - d as f64 / ca.len().max(cb.len()) as f64
        };
        prop_assert_eq!(v, expect, "footnote formula, bit-exact");
    }

    #[test]
    fn targets_then_greedy_render_reproduces_answer(
        word_picks in proptest::collection::vec(0usize..6, 1..5),
        seed in 0u64..1000,
    ) {
        let vocab = Vocabulary::new(["red", "green", "blue", "one", "two"]);
        let mut rng = Rng::new(seed);
        let ocr: Vec<String> = (0..3).map(|i| format!("tok{}{}", i, rng.below(10))).collect();
        // answer words drawn from vocabulary and OCR strings
        let words: Vec<String> = word_picks
            .iter()
            .map(|&p| {
                if p < 5 {
                    vocab.word(4 + (p % 5)).to_string()
                } else {
                    ocr[p % 3].clone()
                }
            })
            .collect();
        let answer = words.join(" ");
        let targets = build_targets(&answer, &vocab, &ocr, 3, 12).unwrap();
        // a model rigged to the targets: per step, argmax over the
        // multi-hot vector (vocabulary before OCR on ties)
        let mut steps = Vec::new();
        for t in &targets.steps {
            let best = t
                .iter()
                .enumerate()
                .max_by(|(i, a), (j, b)| a.partial_cmp(b).unwrap().then(j.cmp(i)))
                .map(|(i, _)| i)
                .unwrap();
            if best == END {
                break;
            }
            let step = if best < vocab.len() {
                DecodingStep::Vocab(best)
            } else {
                DecodingStep::Ocr(best - vocab.len())
            };
            steps.push(step);
        }
        prop_assert_eq!(render(&steps, &vocab, &ocr), answer);
    }
}
