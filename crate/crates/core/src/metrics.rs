//! Translation and recognition metrics: WER with an edit-operation
//! breakdown, corpus-level BLEU-1..4, and sentence-level ROUGE-L F1.
//!
//! Recipe notes, also emitted in report headers: BLEU uses modified n-gram
//! precision with clipping and add-epsilon (1e-9) smoothing of zero
//! precisions; ROUGE-L is the sentence-level LCS F1 with beta = 1, averaged
//! over the corpus. All functions are pure.

use serde::Serialize;

use crate::error::{MetricError, Result};

pub const BLEU_SMOOTH_EPSILON: f64 = 1e-9;

/// Minimum-edit-distance word error rate. Among minimal alignments the
/// breakdown is fixed by backtrace preference: substitution, then deletion,
/// then insertion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
    pub wer: f64,
}

pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<WerBreakdown, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let h = hyp.len();
    let r = reference.len();
    // d[i][j]: edit distance between hyp[..i] and reference[..j].
    let mut d = vec![vec![0usize; r + 1]; h + 1];
    for (j, row) in d[0].iter_mut().enumerate() {
        *row = j;
    }
    for i in 1..=h {
        d[i][0] = i;
        for j in 1..=r {
            let sub_cost = usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = (d[i - 1][j - 1] + sub_cost)
                .min(d[i][j - 1] + 1) // deletion: reference token unmatched
                .min(d[i - 1][j] + 1); // insertion: extra hypothesis token
        }
    }
    let mut substitutions = 0;
    let mut deletions = 0;
    let mut insertions = 0;
    let (mut i, mut j) = (h, r);
    while i > 0 || j > 0 {
        let cur = d[i][j];
        if i > 0 && j > 0 {
            let sub_cost = usize::from(hyp[i - 1] != reference[j - 1]);
            if d[i - 1][j - 1] + sub_cost == cur {
                substitutions += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j - 1] + 1 == cur {
            deletions += 1;
            j -= 1;
            continue;
        }
        insertions += 1;
        i -= 1;
    }
    Ok(WerBreakdown {
        substitutions,
        deletions,
        insertions,
        reference_length: r,
        wer: (substitutions + deletions + insertions) as f64 / r as f64,
    })
}

/// Corpus WER: error counts pooled over all pairs before dividing.
pub fn corpus_wer<T: PartialEq>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
) -> Result<WerBreakdown, MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    let mut total = WerBreakdown {
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        reference_length: 0,
        wer: 0.0,
    };
    for (h, r) in hyps.iter().zip(refs) {
        let b = wer(h, r)?;
        total.substitutions += b.substitutions;
        total.deletions += b.deletions;
        total.insertions += b.insertions;
        total.reference_length += b.reference_length;
    }
    total.wer = (total.substitutions + total.deletions + total.insertions) as f64
        / total.reference_length as f64;
    Ok(total)
}

#[derive(Debug, Clone, Serialize)]
pub struct BleuReport {
    /// BLEU-1..4 in [0, 100].
    pub bleu: [f64; 4],
    pub brevity_penalty: f64,
    /// Modified n-gram precisions before smoothing.
    pub precisions: [f64; 4],
}

fn ngram_counts<T: PartialEq + Clone>(tokens: &[T], n: usize) -> Vec<(&[T], usize)> {
    let mut counts: Vec<(&[T], usize)> = Vec::new();
    if tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        match counts.iter_mut().find(|(g, _)| *g == gram) {
            Some((_, c)) => *c += 1,
            None => counts.push((gram, 1)),
        }
    }
    counts
}

/// Corpus BLEU with one reference per hypothesis.
pub fn bleu<T: PartialEq + Clone>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
) -> Result<BleuReport, MetricError> {
    let wrapped: Vec<Vec<Vec<T>>> = refs.iter().map(|r| vec![r.clone()]).collect();
    bleu_multi(hyps, &wrapped)
}

/// Corpus BLEU with any number of references per hypothesis. Clipping takes
/// the per-n-gram maximum over references; the brevity penalty uses the
/// closest reference length.
pub fn bleu_multi<T: PartialEq + Clone>(
    hyps: &[Vec<T>],
    refs: &[Vec<Vec<T>>],
) -> Result<BleuReport, MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if refs.iter().any(|r| r.is_empty() || r.iter().any(Vec::is_empty)) {
        return Err(MetricError::EmptyReference);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, refset) in hyps.iter().zip(refs) {
        hyp_len += hyp.len();
        ref_len += refset
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l as i64 - hyp.len() as i64).abs())
            .unwrap();
        for n in 1..=4usize {
            let hyp_grams = ngram_counts(hyp, n);
            total[n - 1] += hyp_grams.iter().map(|(_, c)| c).sum::<usize>();
            for (gram, count) in hyp_grams {
                let clip = refset
                    .iter()
                    .map(|r| r.windows(n).filter(|w| *w == gram).count())
                    .max()
                    .unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
        }
    }
    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        precisions[n] = if total[n] > 0 { matched[n] as f64 / total[n] as f64 } else { 0.0 };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let mut bleu = [0.0f64; 4];
    for n in 0..4 {
        let log_mean: f64 = (0..=n)
            .map(|k| precisions[k].max(BLEU_SMOOTH_EPSILON).ln())
            .sum::<f64>()
            / (n + 1) as f64;
        bleu[n] = 100.0 * brevity_penalty * log_mean.exp();
    }
    Ok(BleuReport { bleu, brevity_penalty, precisions })
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L F1 (beta = 1) averaged over the corpus, in [0, 100].
pub fn rouge_l<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64, MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(MetricError::EmptyReference);
    }
    let mut sum = 0.0;
    for (hyp, reference) in hyps.iter().zip(refs) {
        if hyp.is_empty() {
            continue;
        }
        let lcs = lcs_len(hyp, reference) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / hyp.len() as f64;
        let r = lcs / reference.len() as f64;
        sum += 2.0 * p * r / (p + r);
    }
    Ok(100.0 * sum / hyps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive minimum-edit-script oracle for short sequences.
    fn edit_distance_oracle(hyp: &[u32], reference: &[u32]) -> usize {
        fn go(hyp: &[u32], reference: &[u32]) -> usize {
            match (hyp.first(), reference.first()) {
                (None, None) => 0,
                (None, Some(_)) => reference.len(),
                (Some(_), None) => hyp.len(),
                (Some(h), Some(r)) => {
                    let sub = go(&hyp[1..], &reference[1..]) + usize::from(h != r);
                    let del = go(hyp, &reference[1..]) + 1;
                    let ins = go(&hyp[1..], reference) + 1;
                    sub.min(del).min(ins)
                }
            }
        }
        go(hyp, reference)
    }

    #[test]
    fn identical_sequences_have_zero_wer() {
        let b = wer(&[1u32, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!((b.substitutions, b.deletions, b.insertions), (0, 0, 0));
        assert_eq!(b.wer, 0.0);
    }

    #[test]
    fn deletion_example() {
        // ref [a,b,c], hyp [a,c]: one deleted reference token.
        let b = wer(&[0u32, 2], &[0, 1, 2]).unwrap();
        assert_eq!((b.substitutions, b.deletions, b.insertions), (0, 1, 0));
        assert!((b.wer - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(edit_distance_oracle(&[0, 2], &[0, 1, 2]), 1);
    }

    #[test]
    fn substitution_plus_insertion_example() {
        // ref [a], hyp [b,b]: S=1, I=1, WER = 2.
        let b = wer(&[1u32, 1], &[0]).unwrap();
        assert_eq!((b.substitutions, b.deletions, b.insertions), (1, 0, 1));
        assert_eq!(b.wer, 2.0);
        assert_eq!(edit_distance_oracle(&[1, 1], &[0]), 2);
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert!(wer(&[1u32], &[]).is_err());
    }

    #[test]
    fn breakdown_sums_to_oracle_distance_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let hl = rng.gen_range(0..=6);
            let rl = rng.gen_range(1..=6);
            let hyp: Vec<u32> = (0..hl).map(|_| rng.gen_range(0..3)).collect();
            let reference: Vec<u32> = (0..rl).map(|_| rng.gen_range(0..3)).collect();
            let b = wer(&hyp, &reference).unwrap();
            let oracle = edit_distance_oracle(&hyp, &reference);
            assert_eq!(b.substitutions + b.deletions + b.insertions, oracle);
        }
    }

    #[test]
    fn identical_corpora_score_perfect_bleu() {
        let corpus = vec![vec![1u32, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        let report = bleu(&corpus, &corpus).unwrap();
        for n in 0..4 {
            assert!((report.bleu[n] - 100.0).abs() < 1e-9, "BLEU-{} = {}", n + 1, report.bleu[n]);
        }
        assert_eq!(report.brevity_penalty, 1.0);
    }

    #[test]
    fn unigram_precision_example() {
        // hyp [a,b] vs ref [a,c]: one of two unigrams matches.
        let report = bleu(&[vec![0u32, 1]], &[vec![0u32, 2]]).unwrap();
        assert!((report.precisions[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        let report = bleu(&[vec![], vec![]], &[vec![1u32, 2], vec![3, 4]]).unwrap();
        for n in 0..4 {
            assert!(report.bleu[n] < 1e-6);
        }
    }

    #[test]
    fn corpus_order_does_not_change_bleu() {
        let hyps = vec![vec![1u32, 2, 3], vec![4, 5], vec![1, 4, 2]];
        let refs = vec![vec![1u32, 2, 4], vec![4, 5, 6], vec![1, 2, 2]];
        let a = bleu(&hyps, &refs).unwrap();
        let hyps_rev: Vec<_> = hyps.iter().rev().cloned().collect();
        let refs_rev: Vec<_> = refs.iter().rev().cloned().collect();
        let b = bleu(&hyps_rev, &refs_rev).unwrap();
        assert_eq!(a.bleu, b.bleu);
    }

    #[test]
    fn multi_reference_clipping() {
        // Two references; the better-matching one should lift precision.
        let hyps = vec![vec![1u32, 2]];
        let refs = vec![vec![vec![9u32, 9], vec![1u32, 2]]];
        let report = bleu_multi(&hyps, &refs).unwrap();
        assert!((report.precisions[0] - 1.0).abs() < 1e-12);
        assert!((report.precisions[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_identical_is_100() {
        let corpus = vec![vec![1u32, 2, 3]];
        assert!((rouge_l(&corpus, &corpus).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_hand_example() {
        // hyp [a,b,c], ref [a,c]: LCS 2, P = 2/3, R = 1, F1 = 0.8.
        let score = rouge_l(&[vec![0u32, 1, 2]], &[vec![0u32, 2]]).unwrap();
        assert!((score - 80.0).abs() < 1e-9, "{score}");
    }

    #[test]
    fn rouge_disjoint_is_zero() {
        let score = rouge_l(&[vec![1u32, 2]], &[vec![3u32, 4]]).unwrap();
        assert_eq!(score, 0.0);
    }
}
