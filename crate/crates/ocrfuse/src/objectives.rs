//! Training losses and evaluation metrics: multi-label BCE over the
//! dual-source score vector, the ANLS-weighted policy-gradient term, edit
//! distance / ANLS, and exact-match accuracy.

use serde::{Deserialize, Serialize};

use crate::decoder::ScoreVector;
use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};
use crate::vocab::{Vocabulary, END, UNK};

/// Weighting of the policy-gradient term. With `pg_enabled` false (or
/// `alpha` = 0) training uses the BCE loss alone.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub pg_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            pg_enabled: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Per-step multi-hot targets over vocab_size + N slots. A step may mark
/// several positives when the same word exists in the vocabulary and among
/// the OCR tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTargets {
    pub vocab_size: usize,
    pub n_slots: usize,
    pub steps: Vec<Vec<f64>>,
}

impl StepTargets {
    pub fn width(&self) -> usize {
        self.vocab_size + self.n_slots
    }
}

/// Builds teacher-forcing targets for a whitespace-tokenized answer.
/// Each word marks its vocabulary index (when present) and every populated
/// OCR slot with the same lowercased string; a word matching neither marks
/// the unk slot. A final step marks the end token. An empty answer yields
/// the single end step.
pub fn build_targets(
    answer: &str,
    vocab: &Vocabulary,
    ocr_strings: &[String],
    n_slots: usize,
    max_steps: usize,
) -> Result<StepTargets> {
    assert!(ocr_strings.len() <= n_slots);
    let words: Vec<String> = answer.split_whitespace().map(|w| w.to_lowercase()).collect();
    if words.len() + 1 > max_steps {
        return Err(Error::Data(format!(
            "answer has {} words; at most {} fit in {} decoding steps",
            words.len(),
            max_steps - 1,
            max_steps
        )));
    }
    let width = vocab.len() + n_slots;
    let mut steps = Vec::with_capacity(words.len() + 1);
    for w in &words {
        let mut t = vec![0.0; width];
        let mut any = false;
        if let Some(i) = vocab.index_of(w) {
            t[i] = 1.0;
            any = true;
        }
        for (j, s) in ocr_strings.iter().enumerate() {
            if s.to_lowercase() == *w {
                t[vocab.len() + j] = 1.0;
                any = true;
            }
        }
        if !any {
            t[UNK] = 1.0;
        }
        steps.push(t);
    }
    let mut end = vec![0.0; width];
    end[END] = 1.0;
    steps.push(end);
    Ok(StepTargets {
        vocab_size: vocab.len(),
        n_slots,
        steps,
    })
}

/// Multi-label binary cross-entropy, averaged over valid step×slot entries
/// (−∞-masked slots are excluded from both the sum and the count).
/// Evaluated in the logit-stable form so gradients survive saturation.
pub fn bce_loss(tape: &mut Tape, preds: &[ScoreVector], targets: &StepTargets) -> Result<TensorId> {
    assert_eq!(preds.len(), targets.steps.len(), "step count");
    let mut total: Option<TensorId> = None;
    let mut valid_entries = 0usize;
    for (sv, gt) in preds.iter().zip(&targets.steps) {
        assert_eq!(sv.valid.len(), gt.len(), "slot count");
        valid_entries += sv.valid.iter().filter(|&&ok| ok).count();
        let per_entry = tape.bce_with_logits(sv.scores, gt, &sv.valid)?;
        let step_sum = tape.sum_reduce(per_entry);
        total = Some(match total {
            Some(t) => tape.add(t, step_sum)?,
            None => step_sum,
        });
    }
    let total = total.expect("at least one step");
    Ok(tape.scale(total, 1.0 / valid_entries as f64))
}

/// Renders the per-step argmax of a score sequence, stopping at the end
/// token. This is the φ mapping of the policy-gradient reward.
pub fn render_argmax(
    tape: &Tape,
    preds: &[ScoreVector],
    vocab: &Vocabulary,
    ocr_strings: &[String],
) -> String {
    let mut steps = Vec::new();
    for sv in preds {
        let step = sv.argmax(tape);
        if crate::decoder::is_end(step) {
            break;
        }
        steps.push(step);
    }
    crate::decoder::render(&steps, vocab, ocr_strings)
}

/// Policy-gradient auxiliary loss: r is the ANLS between the rendered
/// ground truth and the rendered argmax prediction; the log terms use the
/// softmax probabilities clamped away from {0,1} so the loss stays finite,
/// and gradients flow through the softmax only (the reward and the argmax
/// indicator are treated as constants).
pub fn pg_loss(
    tape: &mut Tape,
    preds: &[ScoreVector],
    targets: &StepTargets,
    gt_answer: &str,
    vocab: &Vocabulary,
    ocr_strings: &[String],
) -> Result<TensorId> {
    assert_eq!(preds.len(), targets.steps.len(), "step count");
    let rendered = render_argmax(tape, preds, vocab, ocr_strings);
    let r = anls(gt_answer, &rendered);
    let mut total: Option<TensorId> = None;
    let mut valid_entries = 0usize;
    for (sv, gt) in preds.iter().zip(&targets.steps) {
        let width = gt.len();
        let probs = tape.softmax_masked(sv.scores, &sv.valid)?;
        let log_p = tape.log(probs); // clamps probs below at 1e-12
        let neg = tape.scale(probs, -1.0);
        let ones = tape.constant_vec(vec![1.0; width]);
        let one_minus = tape.add(ones, neg)?; // clamped below by log()
        let log_q = tape.log(one_minus);
        let y = tape.constant_vec(gt.clone());
        let one_minus_y: Vec<f64> = gt.iter().map(|v| 1.0 - v).collect();
        let ym = tape.constant_vec(one_minus_y);
        let pos = tape.mul(y, log_p)?;
        let negt = tape.mul(ym, log_q)?;
        let sum = tape.add(pos, negt)?;
        let mask: Vec<f64> = sv.valid.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
        valid_entries += mask.iter().filter(|&&m| m == 1.0).count();
        let mask = tape.constant_vec(mask);
        let masked = tape.mul(sum, mask)?;
        let step_sum = tape.sum_reduce(masked);
        total = Some(match total {
            Some(t) => tape.add(t, step_sum)?,
            None => step_sum,
        });
    }
    let total = total.expect("at least one step");
    Ok(tape.scale(total, (0.5 - r) / valid_entries as f64))
}

/// Unit-cost Levenshtein distance over characters, full DP table.
pub fn edit_distance(s1: &str, s2: &str) -> usize {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            dp[i][j] = (dp[i - 1][j] + 1)
                .min(dp[i][j - 1] + 1)
                .min(dp[i - 1][j - 1] + sub);
        }
    }
    dp[n][m]
}

/// Normalized Levenshtein similarity: 1 − d(s1,s2) / max(len(s1), len(s2)),
/// case-insensitive after trimming. Two empty strings are identical (1.0).
pub fn anls(s1: &str, s2: &str) -> f64 {
    let a = s1.trim().to_lowercase();
    let b = s2.trim().to_lowercase();
    let la = a.chars().count();
    let lb = b.chars().count();
    if la == 0 && lb == 0 {
        return 1.0;
    }
    1.0 - edit_distance(&a, &b) as f64 / la.max(lb) as f64
}

/// Fraction of instances whose rendered prediction equals any ground-truth
/// string after lowercasing and trimming.
pub fn exact_match_accuracy(preds: &[String], gts: &[Vec<String>]) -> f64 {
    assert_eq!(preds.len(), gts.len());
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, refs)| {
            let p = p.trim().to_lowercase();
            refs.iter().any(|r| r.trim().to_lowercase() == p)
        })
        .count();
    hits as f64 / preds.len() as f64
}

/// Maximum ANLS of a prediction against a set of references.
pub fn best_anls(pred: &str, gts: &[String]) -> f64 {
    gts.iter()
        .map(|g| anls(g, pred))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, ParamStore, TensorValue};
    use crate::rng::Rng;

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("same", "same"), 0);
    }

    #[test]
    fn anls_examples() {
        assert_eq!(anls("hello", "hello"), 1.0);
        assert!((anls("12", "120") - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(anls("a", "b"), 0.0);
        assert_eq!(anls("", ""), 1.0);
        assert_eq!(anls("  HeLLo ", "hello"), 1.0, "trim + case fold");
    }

    fn score_vector(tape: &mut Tape, scores: Vec<f64>, valid: Vec<bool>, vocab_size: usize) -> ScoreVector {
        let id = tape.constant_vec(scores);
        ScoreVector { scores: id, valid, vocab_size }
    }

    #[test]
    fn bce_zero_logit_positive_target_is_ln2() {
        let mut tape = Tape::new();
        let sv = score_vector(&mut tape, vec![0.0], vec![true], 1);
        let targets = StepTargets { vocab_size: 1, n_slots: 0, steps: vec![vec![1.0]] };
        let loss = bce_loss(&mut tape, &[sv], &targets).unwrap();
        assert!((tape.data(loss)[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_saturated_logits_vanish() {
        let mut tape = Tape::new();
        let sv = score_vector(&mut tape, vec![40.0, -40.0], vec![true, true], 2);
        let targets = StepTargets { vocab_size: 2, n_slots: 0, steps: vec![vec![1.0, 0.0]] };
        let loss = bce_loss(&mut tape, &[sv], &targets).unwrap();
        assert!(tape.data(loss)[0] <= 1e-12);
        assert!(tape.data(loss)[0] >= 0.0);
    }

    #[test]
    fn bce_matches_per_entry_oracle() {
        let mut rng = Rng::new(97);
        let mut tape = Tape::new();
        let width = 7;
        let mut svs = Vec::new();
        let mut gts = Vec::new();
        let valid = vec![true, true, true, true, true, false, false];
        for _ in 0..3 {
            let scores: Vec<f64> = (0..width).map(|_| 2.0 * rng.normal()).collect();
            let gt: Vec<f64> = (0..width).map(|_| if rng.uniform() < 0.3 { 1.0 } else { 0.0 }).collect();
            svs.push(score_vector(&mut tape, scores, valid.clone(), 5));
            gts.push(gt);
        }
        let targets = StepTargets { vocab_size: 5, n_slots: 2, steps: gts.clone() };
        let loss = bce_loss(&mut tape, &svs, &targets).unwrap();
        // direct loop oracle over valid entries
        let mut want = 0.0;
        let mut count = 0;
        for (sv, gt) in svs.iter().zip(&gts) {
            let vals = tape.data(sv.scores);
            for j in 0..width {
                if !valid[j] {
                    continue;
                }
                let p = 1.0 / (1.0 + (-vals[j]).exp());
                want += -gt[j] * p.max(1e-12).ln() - (1.0 - gt[j]) * (1.0 - p).max(1e-12).ln();
                count += 1;
            }
        }
        want /= count as f64;
        assert!((tape.data(loss)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn bce_gradients_match_finite_differences() {
        let mut rng = Rng::new(15);
        let mut store = ParamStore::new();
        let data: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        store.add("scores", TensorValue::new(vec![8], data, true));
        let gt = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let targets = StepTargets { vocab_size: 8, n_slots: 0, steps: vec![gt] };
        let report = grad_check::check_gradients(&mut store, 1e-5, None, |tape, store| {
            let s = tape.param(store, crate::tensor::ParamId(0));
            let sv = ScoreVector { scores: s, valid: vec![true; 8], vocab_size: 8 };
            bce_loss(tape, &[sv], &targets)
        })
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn pg_loss_zero_at_half_reward() {
        // rig scores so the rendered prediction has ANLS exactly 0.5 vs gt:
        // gt "ab", prediction "aa" → d=1, maxlen 2 → r = 0.5
        let vocab = Vocabulary::new(["aa", "ab"]);
        let mut tape = Tape::new();
        let mut scores = vec![0.0; vocab.len()];
        scores[4] = 10.0; // "aa" dominates
        let sv = score_vector(&mut tape, scores.clone(), vec![true; 6], 6);
        let sv_end = {
            let mut s = vec![0.0; 6];
            s[END] = 10.0;
            score_vector(&mut tape, s, vec![true; 6], 6)
        };
        let targets = build_targets("ab", &vocab, &[], 0, 12).unwrap();
        let loss = pg_loss(&mut tape, &[sv, sv_end], &targets, "ab", &vocab, &[]).unwrap();
        assert_eq!(tape.data(loss)[0], 0.0, "coefficient (0.5 - r) is exactly 0");
    }

    #[test]
    fn pg_loss_sign_flips_between_perfect_and_zero_reward() {
        let vocab = Vocabulary::new(["aa", "zz"]);
        let build = |gt: &str| {
            let mut tape = Tape::new();
            let mut scores = vec![0.0; 6];
            scores[4] = 10.0; // predict "aa"
            let sv = score_vector(&mut tape, scores, vec![true; 6], 6);
            let mut s_end = vec![0.0; 6];
            s_end[END] = 10.0;
            let sv_end = score_vector(&mut tape, s_end, vec![true; 6], 6);
            let targets = build_targets(gt, &vocab, &[], 0, 12).unwrap();
            let loss = pg_loss(&mut tape, &[sv, sv_end], &targets, gt, &vocab, &[]).unwrap();
            tape.data(loss)[0]
        };
        let perfect = build("aa"); // r = 1, coefficient -0.5
        let zero = build("zz"); // r = 0, coefficient +0.5
        assert!(perfect != 0.0 && zero != 0.0);
        assert!(
            (perfect < 0.0) != (zero < 0.0),
            "sign must flip: perfect {perfect}, zero {zero}"
        );
    }

    #[test]
    fn pg_loss_matches_formula_oracle() {
        let vocab = Vocabulary::new(["w1", "w2"]);
        let ocr = vec!["tok".to_string()];
        let mut rng = Rng::new(55);
        let mut tape = Tape::new();
        let width = vocab.len() + 2;
        let valid = vec![true, true, true, true, true, true, true, false];
        let mut svs = Vec::new();
        for _ in 0..2 {
            let scores: Vec<f64> = (0..width).map(|_| rng.normal()).collect();
            svs.push(score_vector(&mut tape, scores, valid.clone(), vocab.len()));
        }
        let targets = build_targets("tok", &vocab, &ocr, 2, 12).unwrap();
        let loss = pg_loss(&mut tape, &svs, &targets, "tok", &vocab, &ocr).unwrap();

        // direct oracle
        let rendered = render_argmax(&tape, &svs, &vocab, &ocr);
        let r = anls("tok", &rendered);
        let mut want = 0.0;
        let mut count = 0;
        for (sv, gt) in svs.iter().zip(&targets.steps) {
            let vals = tape.data(sv.scores);
            let max = vals
                .iter()
                .zip(&valid)
                .filter(|(_, &ok)| ok)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = vals
                .iter()
                .zip(&valid)
                .filter(|(_, &ok)| ok)
                .map(|(v, _)| (v - max).exp())
                .sum();
            for j in 0..width {
                if !valid[j] {
                    continue;
                }
                let p = ((vals[j] - max).exp() / z).clamp(1e-12, 1.0 - 1e-12);
                want += gt[j] * p.ln() + (1.0 - gt[j]) * (1.0 - p).ln();
                count += 1;
            }
        }
        want *= (0.5 - r) / count as f64;
        assert!((tape.data(loss)[0] - want).abs() < 1e-10);
    }

    #[test]
    fn build_targets_single_vocab_source() {
        let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::new(words);
        // "w13" sits at index 4 + 13 = 17
        let t = build_targets("w13", &vocab, &[], 3, 12).unwrap();
        assert_eq!(t.steps.len(), 2);
        let hot: Vec<usize> = t.steps[0]
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hot, vec![17]);
        let hot_end: Vec<usize> = t.steps[1]
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hot_end, vec![END]);
    }

    #[test]
    fn build_targets_multi_hot_ocr_only() {
        let vocab = Vocabulary::new(["other"]);
        let ocr: Vec<String> = ["a", "b", "word", "c", "d", "e", "f", "word"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let t = build_targets("word", &vocab, &ocr, 8, 12).unwrap();
        let hot: Vec<usize> = t.steps[0]
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hot, vec![vocab.len() + 2, vocab.len() + 7]);
    }

    #[test]
    fn build_targets_ocr_composite_answer() {
        let vocab = Vocabulary::new(["unrelated"]);
        let ocr: Vec<String> = ["tellus", "mater", "inc."].iter().map(|s| s.to_string()).collect();
        let t = build_targets("tellus mater inc.", &vocab, &ocr, 3, 12).unwrap();
        assert_eq!(t.steps.len(), 4);
        for (step, j) in t.steps.iter().take(3).zip(0..3) {
            let hot: Vec<usize> = step
                .iter()
                .enumerate()
                .filter(|(_, v)| **v == 1.0)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(hot, vec![vocab.len() + j]);
        }
    }

    #[test]
    fn build_targets_unmatched_word_marks_unk() {
        let vocab = Vocabulary::new(["known"]);
        let t = build_targets("mystery", &vocab, &[], 0, 12).unwrap();
        assert_eq!(t.steps[0][UNK], 1.0);
    }

    #[test]
    fn build_targets_empty_answer_is_single_end_step() {
        let vocab = Vocabulary::new(["w"]);
        let t = build_targets("", &vocab, &[], 0, 12).unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.steps[0][END], 1.0);
    }

    #[test]
    fn build_targets_rejects_overlong_answer() {
        let vocab = Vocabulary::new(["w"]);
        let long = vec!["w"; 12].join(" ");
        assert!(build_targets(&long, &vocab, &[], 0, 12).is_err());
    }

    #[test]
    fn exact_match_counting() {
        let preds = vec!["a".to_string(), "b".to_string(), "c".to_string(), "d".to_string()];
        let gts = vec![
            vec!["a".to_string()],
            vec!["x".to_string(), "B".to_string()],
            vec!["c".to_string()],
            vec!["nope".to_string()],
        ];
        assert_eq!(exact_match_accuracy(&preds, &gts), 0.75);
        let all: Vec<Vec<String>> = preds.iter().map(|p| vec![p.clone()]).collect();
        assert_eq!(exact_match_accuracy(&preds, &all), 1.0);
        let none: Vec<Vec<String>> = preds.iter().map(|_| vec!["zz".to_string()]).collect();
        assert_eq!(exact_match_accuracy(&preds, &none), 0.0);
    }
}
