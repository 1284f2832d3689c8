//! Greedy and beam-search decoding with GNMT-style length normalization.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::vocab::{BOS, EOS};

use super::model::{Seq2SeqModel, Source};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecodeParams {
    pub beam_width: usize,
    pub length_penalty_alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { beam_width: 3, length_penalty_alpha: 1.0, max_len: 64 }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.beam_width == 0 {
            return Err(ModelError::BadConfig("beam_width must be at least 1".into()));
        }
        if self.length_penalty_alpha < 0.0 {
            return Err(ModelError::BadConfig("length_penalty_alpha must be >= 0".into()));
        }
        if self.max_len == 0 {
            return Err(ModelError::BadConfig("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// The GNMT length penalty `((5 + len) / 6)^alpha`; finished hypotheses are
/// ranked by `log_prob / length_penalty(alpha, len)`.
pub fn length_penalty(alpha: f64, len: usize) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    /// Generated tokens, EOS included once finished.
    tokens: Vec<u32>,
    log_prob: f64,
}

impl Hypothesis {
    fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(alpha, self.tokens.len())
    }
}

/// Deterministic ordering by raw log-probability (used while searching),
/// ties broken toward the lexicographically smaller token sequence, i.e.
/// lower token id first.
fn by_log_prob(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Same ordering over final normalized scores.
fn by_score(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> std::cmp::Ordering {
    b.score(alpha)
        .partial_cmp(&a.score(alpha))
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over the target vocabulary. At every step all one-token
/// extensions of the live set compete in a single pool ranked by raw
/// log-probability; the top `beam_width` survive, and survivors ending in
/// EOS retire to the finished set (so width 1 reduces exactly to greedy
/// decoding). Finished hypotheses are ranked by
/// `log_prob / length_penalty(alpha, len)`; a hypothesis still live at
/// `max_len` has EOS force-appended with its probability included.
/// Returns the best token sequence (without BOS/EOS) and its score.
pub fn beam_search(
    model: &Seq2SeqModel,
    source: Source<'_>,
    params: &DecodeParams,
) -> Result<(Vec<u32>, f64)> {
    params.validate()?;
    let alpha = params.length_penalty_alpha;
    let memory = model.encode(source)?;
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..params.max_len {
        let mut candidates: Vec<Hypothesis> = Vec::with_capacity(live.len() * 8);
        for hyp in &live {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&hyp.tokens);
            let log_z = model.decode_step_log(&prefix, &memory)?;
            for (tok, &lp) in log_z.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Hypothesis { tokens, log_prob: hyp.log_prob + lp });
            }
        }
        candidates.sort_by(by_log_prob);
        candidates.truncate(params.beam_width);
        live = Vec::with_capacity(params.beam_width);
        for cand in candidates {
            if *cand.tokens.last().unwrap() == EOS {
                finished.push(cand);
            } else {
                live.push(cand);
            }
        }
        if live.is_empty() {
            break;
        }
    }

    // Force-terminate whatever is still live at the length budget.
    for hyp in live {
        let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(&hyp.tokens);
        let log_z = model.decode_step_log(&prefix, &memory)?;
        let mut tokens = hyp.tokens;
        tokens.push(EOS);
        finished.push(Hypothesis { tokens, log_prob: hyp.log_prob + log_z[EOS as usize] });
    }
    finished.sort_by(|a, b| by_score(a, b, alpha));
    let best = finished.into_iter().next().expect("at least one hypothesis");
    let score = best.score(alpha);
    let mut tokens = best.tokens;
    tokens.pop(); // strip EOS
    Ok((tokens, score))
}

/// Greedy decoding: beam search with width 1 by definition.
pub fn greedy_decode(model: &Seq2SeqModel, source: Source<'_>, max_len: usize) -> Result<(Vec<u32>, f64)> {
    beam_search(
        model,
        source,
        &DecodeParams { beam_width: 1, length_penalty_alpha: 0.0, max_len },
    )
}
