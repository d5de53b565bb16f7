//! Edit-distance evaluation: Levenshtein with an operation breakdown,
//! corpus CER/WER/WAR/CAR, and per-character accuracy from one canonical
//! DP alignment.
//!
//! CER divides the substitution+insertion+deletion count by the ground
//! truth length; CAR is its complement, WAR the exact-match percentage.
//! Comparisons run over NFC-normalized code points, case-sensitive.

use crate::data::nfc_normalize;
use crate::{Error, Result};
use std::collections::BTreeMap;

/// Minimal edit script counts between a reference and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditOps {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    /// Reference length used as the CER denominator, floored at 1.
    pub ref_len: usize,
}

impl EditOps {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Character error rate as a fraction (not percent).
    pub fn cer(&self) -> f64 {
        self.distance() as f64 / self.ref_len as f64
    }
}

/// Edit operations turning `reference` into `hypothesis`. Among minimal
/// scripts, substitutions are preferred over insert+delete pairs.
pub fn levenshtein(reference: &str, hypothesis: &str) -> EditOps {
    let a: Vec<char> = nfc_normalize(reference).chars().collect();
    let b: Vec<char> = nfc_normalize(hypothesis).chars().collect();
    let ops = edit_ops(&a, &b);
    EditOps {
        ref_len: a.len().max(1),
        ..ops
    }
}

/// Generic DP edit script over token slices.
fn edit_ops<T: PartialEq>(a: &[T], b: &[T]) -> EditOps {
    let (n, m) = (a.len(), b.len());
    let mut dist = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dist[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dist[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dist[idx(i - 1, j - 1)] + usize::from(a[i - 1] != b[j - 1]);
            let del = dist[idx(i - 1, j)] + 1;
            let ins = dist[idx(i, j - 1)] + 1;
            dist[idx(i, j)] = sub.min(del).min(ins);
        }
    }
    // backtrace with the documented tie-break: substitution/match first,
    // then deletion, then insertion
    let (mut i, mut j) = (n, m);
    let (mut subs, mut ins, mut dels) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diag = dist[idx(i - 1, j - 1)] + usize::from(a[i - 1] != b[j - 1]);
            if diag == dist[idx(i, j)] {
                if a[i - 1] != b[j - 1] {
                    subs += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[idx(i - 1, j)] + 1 == dist[idx(i, j)] {
            dels += 1;
            i -= 1;
            continue;
        }
        ins += 1;
        j -= 1;
    }
    EditOps {
        substitutions: subs,
        insertions: ins,
        deletions: dels,
        ref_len: n.max(1),
    }
}

/// One canonical character alignment between reference and hypothesis,
/// as pairs of (reference char, hypothesis char); `None` marks a gap.
/// Follows the same backtrace tie-break as [`levenshtein`].
pub fn char_alignment(reference: &str, hypothesis: &str) -> Vec<(Option<char>, Option<char>)> {
    let a: Vec<char> = nfc_normalize(reference).chars().collect();
    let b: Vec<char> = nfc_normalize(hypothesis).chars().collect();
    let (n, m) = (a.len(), b.len());
    let mut dist = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dist[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dist[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dist[idx(i - 1, j - 1)] + usize::from(a[i - 1] != b[j - 1]);
            dist[idx(i, j)] = sub.min(dist[idx(i - 1, j)] + 1).min(dist[idx(i, j - 1)] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut pairs = Vec::new();
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diag = dist[idx(i - 1, j - 1)] + usize::from(a[i - 1] != b[j - 1]);
            if diag == dist[idx(i, j)] {
                pairs.push((Some(a[i - 1]), Some(b[j - 1])));
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[idx(i - 1, j)] + 1 == dist[idx(i, j)] {
            pairs.push((Some(a[i - 1]), None));
            i -= 1;
            continue;
        }
        pairs.push((None, Some(b[j - 1])));
        j -= 1;
    }
    pairs.reverse();
    pairs
}

/// Aggregated evaluation over (prediction, ground truth) pairs; all rates
/// are percentages.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub cer: f64,
    pub wer: f64,
    /// Word accuracy rate: percentage of exact transcript matches.
    pub war: f64,
    /// Character accuracy rate: `100 - cer`.
    pub car: f64,
    /// Per ground-truth character: percentage aligned to an identical
    /// predicted character.
    pub per_char: BTreeMap<char, f64>,
    pub sample_count: usize,
    /// True when CER was macro-averaged over pairs instead of
    /// length-weighted.
    pub macro_averaged: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Average per-pair CERs instead of micro-averaging over characters.
    pub macro_cer: bool,
}

pub fn corpus_eval(pairs: &[(String, String)]) -> Result<EvalReport> {
    corpus_eval_with(pairs, EvalOptions::default())
}

/// `pairs` are (prediction, ground truth).
pub fn corpus_eval_with(pairs: &[(String, String)], opts: EvalOptions) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("corpus_eval needs at least one pair".into()));
    }
    let mut total_char_dist = 0usize;
    let mut total_ref_chars = 0usize;
    let mut macro_cer_sum = 0.0;
    let mut total_word_dist = 0usize;
    let mut total_ref_words = 0usize;
    let mut exact = 0usize;
    let mut char_correct: BTreeMap<char, usize> = BTreeMap::new();
    let mut char_total: BTreeMap<char, usize> = BTreeMap::new();

    for (pred, gt) in pairs {
        let gt_n = nfc_normalize(gt);
        let pred_n = nfc_normalize(pred);
        let ops = levenshtein(&gt_n, &pred_n);
        total_char_dist += ops.distance();
        total_ref_chars += gt_n.chars().count().max(1);
        macro_cer_sum += ops.cer();
        if gt_n == pred_n {
            exact += 1;
        }

        let gt_words: Vec<&str> = gt_n.split(' ').filter(|w| !w.is_empty()).collect();
        let pred_words: Vec<&str> = pred_n.split(' ').filter(|w| !w.is_empty()).collect();
        let word_ops = edit_ops(&gt_words, &pred_words);
        total_word_dist += word_ops.distance();
        total_ref_words += gt_words.len().max(1);

        for (r, h) in char_alignment(&gt_n, &pred_n) {
            if let Some(rc) = r {
                *char_total.entry(rc).or_insert(0) += 1;
                if h == Some(rc) {
                    *char_correct.entry(rc).or_insert(0) += 1;
                }
            }
        }
    }

    let cer = if opts.macro_cer {
        100.0 * macro_cer_sum / pairs.len() as f64
    } else {
        100.0 * total_char_dist as f64 / total_ref_chars as f64
    };
    let wer = 100.0 * total_word_dist as f64 / total_ref_words as f64;
    let war = 100.0 * exact as f64 / pairs.len() as f64;
    let per_char = char_total
        .iter()
        .map(|(&ch, &total)| {
            let correct = char_correct.get(&ch).copied().unwrap_or(0);
            (ch, 100.0 * correct as f64 / total as f64)
        })
        .collect();

    Ok(EvalReport {
        cer,
        wer,
        war,
        car: 100.0 - cer,
        per_char,
        sample_count: pairs.len(),
        macro_averaged: opts.macro_cer,
    })
}

impl EvalReport {
    /// CSV rendering: an overall row followed by one row per character.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("metric,symbol,value\n");
        let avg = if self.macro_averaged { "macro" } else { "micro" };
        out.push_str(&format!("cer_{avg},,{:.4}\n", self.cer));
        out.push_str(&format!("wer,,{:.4}\n", self.wer));
        out.push_str(&format!("war,,{:.4}\n", self.war));
        out.push_str(&format!("car,,{:.4}\n", self.car));
        out.push_str(&format!("samples,,{}\n", self.sample_count));
        for (ch, acc) in &self.per_char {
            out.push_str(&format!("char_accuracy,{ch},{acc:.4}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_strings_have_zero_distance() {
        let ops = levenshtein("абвгд", "абвгд");
        assert_eq!((ops.substitutions, ops.insertions, ops.deletions), (0, 0, 0));
        assert_eq!(ops.cer(), 0.0);
    }

    #[test]
    fn single_substitution() {
        let ops = levenshtein("казах", "казак");
        assert_eq!(ops.substitutions, 1);
        assert_eq!(ops.distance(), 1);
        assert!((ops.cer() - 0.2).abs() <= 1e-12);
    }

    #[test]
    fn kitten_sitting_is_two_subs_one_insert() {
        let ops = levenshtein("kitten", "sitting");
        assert_eq!(ops.distance(), 3);
        assert_eq!(ops.substitutions, 2);
        assert_eq!(ops.insertions, 1);
        assert_eq!(ops.deletions, 0);
        assert!((ops.cer() - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn empty_reference_uses_length_guard() {
        let ops = levenshtein("", "abc");
        assert_eq!(ops.ref_len, 1);
        assert_eq!(ops.insertions, 3);
    }

    /// Exhaustive recursive definition of edit distance; memoized but
    /// structurally the textbook recursion.
    pub(crate) fn recursive_distance(a: &[char], b: &[char]) -> usize {
        fn rec(
            a: &[char],
            b: &[char],
            i: usize,
            j: usize,
            memo: &mut Vec<Vec<Option<usize>>>,
        ) -> usize {
            if i == 0 {
                return j;
            }
            if j == 0 {
                return i;
            }
            if let Some(v) = memo[i][j] {
                return v;
            }
            let sub = rec(a, b, i - 1, j - 1, memo) + usize::from(a[i - 1] != b[j - 1]);
            let del = rec(a, b, i - 1, j, memo) + 1;
            let ins = rec(a, b, i, j - 1, memo) + 1;
            let v = sub.min(del).min(ins);
            memo[i][j] = Some(v);
            v
        }
        let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
        rec(a, b, a.len(), b.len(), &mut memo)
    }

    #[test]
    fn distance_matches_recursive_oracle_on_short_strings() {
        let alphabet = ['а', 'б', 'в'];
        let mut strings: Vec<String> = vec![String::new()];
        for _ in 0..4 {
            let mut next = Vec::new();
            for s in &strings {
                if s.chars().count() == 3 {
                    continue;
                }
                for c in alphabet {
                    let mut t = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
            strings.extend(next);
            strings.sort();
            strings.dedup();
        }
        for a in &strings {
            for b in &strings {
                let ac: Vec<char> = a.chars().collect();
                let bc: Vec<char> = b.chars().collect();
                let expect = recursive_distance(&ac, &bc);
                assert_eq!(levenshtein(a, b).distance(), expect, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn distance_symmetry_and_triangle_inequality() {
        let words = ["кот", "ток", "кит", "ok", "", "алматы", "алмата"];
        for a in words {
            for b in words {
                assert_eq!(levenshtein(a, b).distance(), levenshtein(b, a).distance());
                assert!(levenshtein(a, b).distance() <= a.chars().count().max(b.chars().count()));
                if a == b {
                    assert_eq!(levenshtein(a, b).distance(), 0);
                }
                for c in words {
                    assert!(
                        levenshtein(a, c).distance()
                            <= levenshtein(a, b).distance() + levenshtein(b, c).distance()
                    );
                }
            }
        }
    }

    #[test]
    fn perfect_corpus_scores_perfectly() {
        let pairs = vec![
            ("алматы".to_string(), "алматы".to_string()),
            ("астана".to_string(), "астана".to_string()),
        ];
        let report = corpus_eval(&pairs).unwrap();
        assert_eq!(report.cer, 0.0);
        assert_eq!(report.wer, 0.0);
        assert_eq!(report.war, 100.0);
        assert_eq!(report.car, 100.0);
        assert!(report.per_char.values().all(|&v| v == 100.0));
    }

    #[test]
    fn single_substitution_pair_report() {
        let pairs = vec![("алмата".to_string(), "алматы".to_string())];
        let report = corpus_eval(&pairs).unwrap();
        assert!((report.cer - 100.0 / 6.0).abs() <= 1e-9);
        assert_eq!(report.war, 0.0);
        assert!((report.car + report.cer - 100.0).abs() <= 1e-12);
    }

    #[test]
    fn micro_cer_is_length_weighted_mean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let alphabet = ['а', 'б', 'в', 'г'];
        let mut pairs = Vec::new();
        for _ in 0..40 {
            let n = rng.gen_range(1..8);
            let gt: String = (0..n).map(|_| alphabet[rng.gen_range(0..4)]).collect();
            let m = rng.gen_range(0..8);
            let pred: String = (0..m).map(|_| alphabet[rng.gen_range(0..4)]).collect();
            pairs.push((pred, gt));
        }
        let report = corpus_eval(&pairs).unwrap();
        // direct recomputation
        let mut dist = 0.0;
        let mut chars = 0.0;
        for (pred, gt) in &pairs {
            dist += levenshtein(gt, pred).distance() as f64;
            chars += gt.chars().count().max(1) as f64;
        }
        assert!((report.cer - 100.0 * dist / chars).abs() <= 1e-9);
    }

    #[test]
    fn macro_flag_changes_only_the_averaging() {
        let pairs = vec![
            ("аб".to_string(), "аб".to_string()),
            ("xxxxxxxxxx".to_string(), "аааааааааа".to_string()),
        ];
        let micro = corpus_eval(&pairs).unwrap();
        let macro_ = corpus_eval_with(&pairs, EvalOptions { macro_cer: true }).unwrap();
        assert!(micro.cer != macro_.cer);
        assert_eq!(micro.war, macro_.war);
        assert_eq!(micro.wer, macro_.wer);
        assert!(macro_.macro_averaged);
    }

    #[test]
    fn empty_corpus_is_a_contract_error() {
        assert!(matches!(corpus_eval(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn csv_has_one_row_per_character() {
        let pairs = vec![("аб".to_string(), "ба".to_string())];
        let report = corpus_eval(&pairs).unwrap();
        let csv = report.to_csv();
        let char_rows = csv.lines().filter(|l| l.starts_with("char_accuracy")).count();
        assert_eq!(char_rows, 2);
    }

    #[test]
    fn nfc_normalization_equates_composed_and_decomposed() {
        // и + combining breve vs precomposed й
        let decomposed = "и\u{0306}";
        assert_eq!(levenshtein("й", decomposed).distance(), 0);
    }
}
