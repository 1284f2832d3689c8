//! Connectionist temporal classification: exact log-likelihood and gradient
//! via the forward-backward algorithm, a brute-force enumeration oracle for
//! testing, and the blank-free constrained Viterbi used to segment embedding
//! sequences into gloss pieces.
//!
//! All probability math is carried in log space; zero probability is the
//! `-inf` sentinel and propagates through `log_add`.

use crate::error::{CtcError, Result};
use crate::tensor::{log_add, log_softmax_row, Tensor};

/// Per-step log-probabilities over `C` label classes plus the blank.
/// Layout is `N x (C+1)` with the blank in the last column. Every row must
/// be a normalized distribution.
#[derive(Debug, Clone)]
pub struct LogProbLattice {
    log_probs: Tensor,
}

impl LogProbLattice {
    /// Wraps a matrix of log-probabilities, checking row normalization.
    pub fn new(log_probs: Tensor) -> Result<Self, CtcError> {
        if log_probs.rows == 0 || log_probs.cols < 2 {
            return Err(CtcError::EmptyLattice);
        }
        for n in 0..log_probs.rows {
            let sum: f64 = log_probs.row(n).iter().map(|&lp| lp.exp()).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CtcError::UnnormalizedRow { row: n, sum });
            }
        }
        Ok(Self { log_probs })
    }

    /// Builds a lattice by log-softmaxing raw score rows.
    pub fn from_scores(scores: &Tensor) -> Self {
        let mut log_probs = scores.clone();
        for n in 0..log_probs.rows {
            log_softmax_row(log_probs.row_mut(n));
        }
        Self { log_probs }
    }

    /// Builds a lattice from probability rows (test convenience).
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self, CtcError> {
        let mut t = Tensor::from_rows(rows);
        for v in &mut t.data {
            *v = v.ln();
        }
        Self::new(t)
    }

    /// Number of time steps N.
    pub fn steps(&self) -> usize {
        self.log_probs.rows
    }

    /// Number of non-blank classes C.
    pub fn classes(&self) -> usize {
        self.log_probs.cols - 1
    }

    /// Column index of the blank class.
    pub fn blank(&self) -> usize {
        self.log_probs.cols - 1
    }

    #[inline]
    pub fn log_prob(&self, step: usize, class: usize) -> f64 {
        self.log_probs.get(step, class)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.log_probs
    }
}

/// A frame-to-label assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlignmentPath {
    /// A CTC path over classes including the blank; collapses to some target.
    Blanked { labels: Vec<u32> },
    /// A blank-free path forming exactly one contiguous run per target
    /// position. `starts[v]` is the first step assigned to target position
    /// `v`, which disambiguates adjacent duplicate labels.
    Segmental { labels: Vec<u32>, starts: Vec<usize> },
}

impl AlignmentPath {
    pub fn labels(&self) -> &[u32] {
        match self {
            AlignmentPath::Blanked { labels } => labels,
            AlignmentPath::Segmental { labels, .. } => labels,
        }
    }
}

/// One gloss occupying the half-open step range `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GlossSpan {
    pub label: u32,
    pub start: usize,
    pub end: usize,
    pub source: String,
}

/// Removes consecutive repeats, then blanks: the standard CTC collapse.
pub fn collapse(labels: &[u32], blank: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev: Option<u32> = None;
    for &l in labels {
        if prev != Some(l) {
            if l != blank {
                out.push(l);
            }
            prev = Some(l);
        }
    }
    out
}

/// Minimum number of steps a CTC path needs to emit `target`: one step per
/// label plus a separating blank between adjacent equal labels.
pub fn min_ctc_steps(target: &[u32]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn check_target(lattice: &LogProbLattice, target: &[u32]) -> Result<(), CtcError> {
    for &t in target {
        if t as usize >= lattice.classes() {
            return Err(CtcError::ClassOutOfRange(t, lattice.classes()));
        }
    }
    Ok(())
}

/// The blank-extended label sequence `l'`: blank, g1, blank, g2, ..., blank.
fn extended_target(target: &[u32], blank: u32) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &g in target {
        ext.push(g);
        ext.push(blank);
    }
    ext
}

/// Forward variables `alpha[t][s]` in log space over the extended target.
fn forward_table(lattice: &LogProbLattice, ext: &[u32], blank: u32) -> Vec<Vec<f64>> {
    let n_steps = lattice.steps();
    let s_len = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; n_steps];
    alpha[0][0] = lattice.log_prob(0, ext[0] as usize);
    if s_len > 1 {
        alpha[0][1] = lattice.log_prob(0, ext[1] as usize);
    }
    for t in 1..n_steps {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            // The skip transition is allowed only onto a non-blank label that
            // differs from the label two slots back.
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + lattice.log_prob(t, ext[s] as usize);
        }
    }
    alpha
}

/// Backward variables `beta[t][s]`, emissions from `t` to the end inclusive.
fn backward_table(lattice: &LogProbLattice, ext: &[u32], blank: u32) -> Vec<Vec<f64>> {
    let n_steps = lattice.steps();
    let s_len = ext.len();
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; n_steps];
    beta[n_steps - 1][s_len - 1] = lattice.log_prob(n_steps - 1, ext[s_len - 1] as usize);
    if s_len > 1 {
        beta[n_steps - 1][s_len - 2] = lattice.log_prob(n_steps - 1, ext[s_len - 2] as usize);
    }
    for t in (0..n_steps - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta[t + 1][s + 2]);
            }
            beta[t][s] = acc + lattice.log_prob(t, ext[s] as usize);
        }
    }
    beta
}

fn total_from_alpha(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().expect("non-empty lattice");
    let s_len = last.len();
    if s_len == 1 {
        last[0]
    } else {
        log_add(last[s_len - 1], last[s_len - 2])
    }
}

/// Log-probability `ln p(target | lattice)` summed over all feasible CTC
/// paths, computed by the forward algorithm.
///
/// A target that cannot be emitted in the available steps is an explicit
/// infeasibility error rather than `-inf`.
pub fn ctc_log_likelihood(lattice: &LogProbLattice, target: &[u32]) -> Result<f64, CtcError> {
    check_target(lattice, target)?;
    let needed = min_ctc_steps(target);
    if lattice.steps() < needed {
        return Err(CtcError::InfeasibleTarget { needed, available: lattice.steps() });
    }
    let blank = lattice.blank() as u32;
    let ext = extended_target(target, blank);
    let alpha = forward_table(lattice, &ext, blank);
    Ok(total_from_alpha(&alpha))
}

/// Gradient of `-ln p(target | lattice)` with respect to the pre-softmax
/// scores that produced the lattice, via forward-backward:
/// `grad[t][k] = y[t][k] - sum of path posteriors passing class k at t`.
pub fn ctc_gradient(lattice: &LogProbLattice, target: &[u32]) -> Result<Tensor, CtcError> {
    check_target(lattice, target)?;
    let needed = min_ctc_steps(target);
    if lattice.steps() < needed {
        return Err(CtcError::InfeasibleTarget { needed, available: lattice.steps() });
    }
    let blank = lattice.blank() as u32;
    let ext = extended_target(target, blank);
    let alpha = forward_table(lattice, &ext, blank);
    let beta = backward_table(lattice, &ext, blank);
    let log_p = total_from_alpha(&alpha);

    let n_steps = lattice.steps();
    let n_cols = lattice.classes() + 1;
    let mut grad = Tensor::zeros(n_steps, n_cols);
    for t in 0..n_steps {
        // Posterior mass per class at step t. alpha and beta both include the
        // emission at t, so it is divided out once.
        let mut log_gamma = vec![f64::NEG_INFINITY; n_cols];
        for (s, &label) in ext.iter().enumerate() {
            let emit = lattice.log_prob(t, label as usize);
            if emit == f64::NEG_INFINITY {
                continue;
            }
            let contrib = alpha[t][s] + beta[t][s] - emit - log_p;
            let k = label as usize;
            log_gamma[k] = log_add(log_gamma[k], contrib);
        }
        for k in 0..n_cols {
            let y = lattice.log_prob(t, k).exp();
            grad.set(t, k, y - log_gamma[k].exp());
        }
    }
    Ok(grad)
}

/// Exhaustively enumerates all `(C+1)^N` paths and sums the probability of
/// those collapsing to `target`. Test oracle only; refuses large inputs.
/// Returns `-inf` when no path collapses to the target.
pub fn brute_force_ctc(lattice: &LogProbLattice, target: &[u32]) -> Result<f64, CtcError> {
    check_target(lattice, target)?;
    let n = lattice.steps();
    let c = lattice.classes();
    if n > 10 || c > 4 {
        return Err(CtcError::SizeGuard { n, c });
    }
    let n_labels = c + 1;
    let blank = lattice.blank() as u32;
    let mut path = vec![0u32; n];
    let mut total = f64::NEG_INFINITY;
    loop {
        if collapse(&path, blank) == target {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &l)| lattice.log_prob(t, l as usize))
                .sum();
            total = log_add(total, lp);
        }
        // Next path in base (C+1).
        let mut pos = 0;
        loop {
            if pos == n {
                return Ok(total);
            }
            path[pos] += 1;
            if (path[pos] as usize) < n_labels {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// The most probable blank-free alignment of `target` to the lattice:
/// exactly one non-empty contiguous run of steps per target position, in
/// order. The blank column is excluded from the search space entirely.
///
/// Ties are broken toward the leftmost segmentation: every segment boundary
/// is placed as early as the optimum allows.
pub fn constrained_viterbi(
    lattice: &LogProbLattice,
    target: &[u32],
) -> Result<(AlignmentPath, f64), CtcError> {
    check_target(lattice, target)?;
    if target.is_empty() {
        return Err(CtcError::InfeasibleTarget { needed: 1, available: lattice.steps() });
    }
    let n_steps = lattice.steps();
    let n_targets = target.len();
    if n_steps < n_targets {
        return Err(CtcError::InfeasibleTarget { needed: n_targets, available: n_steps });
    }

    // dp[v][n]: best log-prob with steps 0..=n assigned and step n on target
    // position v. advanced[v][n] records whether the best move entered v at n.
    let mut dp = vec![vec![f64::NEG_INFINITY; n_steps]; n_targets];
    let mut advanced = vec![vec![false; n_steps]; n_targets];
    dp[0][0] = lattice.log_prob(0, target[0] as usize);
    for n in 1..n_steps {
        dp[0][n] = dp[0][n - 1] + lattice.log_prob(n, target[0] as usize);
    }
    for v in 1..n_targets {
        for n in v..n_steps {
            // A later segment may not start so late that the remaining ones
            // cannot fit, but dp handles that implicitly via -inf.
            let stay = dp[v][n - 1];
            let advance = dp[v - 1][n - 1];
            // On ties prefer staying, which pushes the boundary earlier.
            let (best, adv) = if stay >= advance { (stay, false) } else { (advance, true) };
            dp[v][n] = best + lattice.log_prob(n, target[v] as usize);
            advanced[v][n] = adv;
        }
    }

    let best = dp[n_targets - 1][n_steps - 1];
    let mut labels = vec![0u32; n_steps];
    let mut starts = vec![0usize; n_targets];
    let mut v = n_targets - 1;
    for n in (0..n_steps).rev() {
        labels[n] = target[v];
        if v > 0 && (advanced[v][n] || n == v) {
            starts[v] = n;
            v -= 1;
        }
    }
    debug_assert_eq!(v, 0);
    starts[0] = 0;
    Ok((AlignmentPath::Segmental { labels, starts }, best))
}

/// Converts a segmental alignment into spans partitioning `[0, N)`.
pub fn path_to_spans(path: &AlignmentPath, sample_id: &str) -> Vec<GlossSpan> {
    let AlignmentPath::Segmental { labels, starts } = path else {
        panic!("path_to_spans requires a segmental path");
    };
    let n = labels.len();
    let mut spans = Vec::with_capacity(starts.len());
    for (v, &start) in starts.iter().enumerate() {
        let end = starts.get(v + 1).copied().unwrap_or(n);
        spans.push(GlossSpan {
            label: labels[start],
            start,
            end,
            source: sample_id.to_string(),
        });
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn uniform_lattice(n: usize, cols: usize) -> LogProbLattice {
        let p = 1.0 / cols as f64;
        LogProbLattice::from_probs(&vec![vec![p; cols]; n]).unwrap()
    }

    fn random_lattice(rng: &mut impl Rng, n: usize, cols: usize) -> LogProbLattice {
        let mut scores = Tensor::zeros(n, cols);
        for v in &mut scores.data {
            *v = rng.gen_range(-2.0..2.0);
        }
        LogProbLattice::from_scores(&scores)
    }

    #[test]
    fn collapse_rules() {
        // blank is class 2 here
        assert_eq!(collapse(&[0, 0, 2, 1], 2), vec![0, 1]);
        assert_eq!(collapse(&[2, 2, 2], 2), Vec::<u32>::new());
        assert_eq!(collapse(&[0, 2, 0], 2), vec![0, 0]);
    }

    #[test]
    fn two_step_uniform_single_label() {
        // p = 0.5 for {a, blank} at both steps; paths (a,a),(a,-),(-,a)
        // sum to 0.75.
        let lat = uniform_lattice(2, 2);
        let lp = ctc_log_likelihood(&lat, &[0]).unwrap();
        assert!((lp - 0.75f64.ln()).abs() < 1e-12);
        assert!((lp - (-0.287682)).abs() < 1e-6);
        let bf = brute_force_ctc(&lat, &[0]).unwrap();
        assert!((lp - bf).abs() < 1e-12);
    }

    #[test]
    fn single_forced_path_has_log_prob_zero() {
        let lat = LogProbLattice::from_probs(&[vec![1.0, 0.0]]).unwrap();
        let lp = ctc_log_likelihood(&lat, &[0]).unwrap();
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn repeated_label_needs_separating_blank() {
        let lat = uniform_lattice(2, 2);
        let err = ctc_log_likelihood(&lat, &[0, 0]).unwrap_err();
        match err {
            CtcError::InfeasibleTarget { needed, available } => {
                assert_eq!(needed, 3);
                assert_eq!(available, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn brute_force_empty_feasible_set_is_neg_inf() {
        // Brute force does not pre-check feasibility; an impossible target
        // yields the -inf sentinel.
        let lat = uniform_lattice(2, 2);
        let bf = brute_force_ctc(&lat, &[0, 0]).unwrap();
        assert_eq!(bf, f64::NEG_INFINITY);
    }

    #[test]
    fn brute_force_refuses_large_inputs() {
        let lat = uniform_lattice(11, 2);
        assert!(matches!(brute_force_ctc(&lat, &[0]), Err(CtcError::SizeGuard { .. })));
    }

    #[test]
    fn forward_matches_brute_force_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let n = rng.gen_range(1..=6);
            let c = rng.gen_range(1..=3);
            let lat = random_lattice(&mut rng, n, c + 1);
            let len = rng.gen_range(1..=3.min(n));
            let target: Vec<u32> = (0..len).map(|_| rng.gen_range(0..c) as u32).collect();
            if min_ctc_steps(&target) > n {
                continue;
            }
            let fwd = ctc_log_likelihood(&lat, &target).unwrap();
            let bf = brute_force_ctc(&lat, &target).unwrap();
            assert!((fwd - bf).abs() <= 1e-9, "fwd {fwd} vs brute {bf}");
        }
    }

    #[test]
    fn single_step_gradient_is_softmax_minus_onehot() {
        let mut scores = Tensor::from_vec(1, 3, vec![0.3, -0.7, 1.1]);
        let lat = LogProbLattice::from_scores(&scores);
        let grad = ctc_gradient(&lat, &[1]).unwrap();
        log_softmax_row(scores.row_mut(0));
        for k in 0..3 {
            let expected = scores.get(0, k).exp() - if k == 1 { 1.0 } else { 0.0 };
            assert!((grad.get(0, k) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_probability_class_gets_zero_gradient() {
        let lat = LogProbLattice::from_probs(&[
            vec![0.6, 0.0, 0.4],
            vec![0.5, 0.0, 0.5],
        ])
        .unwrap();
        let grad = ctc_gradient(&lat, &[0]).unwrap();
        assert_eq!(grad.get(0, 1), 0.0);
        assert_eq!(grad.get(1, 1), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 5;
        let c = 3;
        let mut scores = Tensor::zeros(n, c + 1);
        for v in &mut scores.data {
            *v = rng.gen_range(-1.5..1.5);
        }
        let target = vec![0u32, 2, 0];
        let grad = ctc_gradient(&LogProbLattice::from_scores(&scores), &target).unwrap();
        let eps = 1e-6;
        for idx in 0..scores.data.len() {
            let mut plus = scores.clone();
            plus.data[idx] += eps;
            let mut minus = scores.clone();
            minus.data[idx] -= eps;
            let lp = ctc_log_likelihood(&LogProbLattice::from_scores(&plus), &target).unwrap();
            let lm = ctc_log_likelihood(&LogProbLattice::from_scores(&minus), &target).unwrap();
            let fd = -(lp - lm) / (2.0 * eps);
            let a = grad.data[idx];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!((a - fd).abs() / denom < 1e-6, "idx {idx}: analytic {a} fd {fd}");
        }
    }

    #[test]
    fn viterbi_prefers_better_segmentation() {
        let lat = LogProbLattice::from_probs(&[
            vec![0.9, 0.1, 0.0],
            vec![0.6, 0.4, 0.0],
            vec![0.1, 0.9, 0.0],
        ])
        .unwrap();
        let (path, lp) = constrained_viterbi(&lat, &[0, 1]).unwrap();
        assert_eq!(path.labels(), &[0, 0, 1]);
        let expected = (0.9f64 * 0.6 * 0.9).ln();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn viterbi_forced_when_steps_equal_targets() {
        let lat = uniform_lattice(3, 3);
        let (path, _) = constrained_viterbi(&lat, &[1, 0, 1]).unwrap();
        assert_eq!(path.labels(), &[1, 0, 1]);
        let spans = path_to_spans(&path, "s");
        assert_eq!(spans.len(), 3);
        assert!(spans.iter().all(|s| s.end - s.start == 1));
    }

    #[test]
    fn viterbi_uniform_lattice_breaks_ties_leftmost() {
        let lat = uniform_lattice(5, 3);
        let (path, _) = constrained_viterbi(&lat, &[0, 1]).unwrap();
        let AlignmentPath::Segmental { labels, starts } = &path else { panic!() };
        assert_eq!(labels, &[0, 1, 1, 1, 1]);
        assert_eq!(starts, &[0, 1]);
    }

    #[test]
    fn viterbi_too_few_steps_is_infeasible() {
        let lat = uniform_lattice(2, 3);
        assert!(matches!(
            constrained_viterbi(&lat, &[0, 1, 0]),
            Err(CtcError::InfeasibleTarget { .. })
        ));
    }

    #[test]
    fn spans_are_run_length_splits() {
        let path = AlignmentPath::Segmental { labels: vec![3, 3, 7], starts: vec![0, 2] };
        let spans = path_to_spans(&path, "sample-1");
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].label, spans[0].start, spans[0].end), (3, 0, 2));
        assert_eq!((spans[1].label, spans[1].start, spans[1].end), (7, 2, 3));
        assert_eq!(spans[0].source, "sample-1");
    }

    #[test]
    fn adjacent_duplicate_targets_split_at_dp_transition() {
        let lat = uniform_lattice(4, 2);
        let (path, _) = constrained_viterbi(&lat, &[0, 0]).unwrap();
        let spans = path_to_spans(&path, "s");
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].label, 0);
        assert_eq!(spans[1].label, 0);
        assert_eq!((spans[0].start, spans[0].end), (0, 1));
        assert_eq!((spans[1].start, spans[1].end), (1, 4));
    }

    #[test]
    fn segmental_path_reconstructs_target() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.gen_range(2..=8);
            let c = rng.gen_range(1..=3);
            let lat = random_lattice(&mut rng, n, c + 1);
            let len = rng.gen_range(1..=n.min(4));
            let target: Vec<u32> = (0..len).map(|_| rng.gen_range(0..c) as u32).collect();
            let (path, _) = constrained_viterbi(&lat, &target).unwrap();
            let spans = path_to_spans(&path, "s");
            let rebuilt: Vec<u32> = spans.iter().map(|s| s.label).collect();
            assert_eq!(rebuilt, target);
            assert_eq!(spans[0].start, 0);
            assert_eq!(spans.last().unwrap().end, n);
            for w in spans.windows(2) {
                assert_eq!(w[0].end, w[1].start);
            }
        }
    }
}
