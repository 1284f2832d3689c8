//! Sign back-translation: train a text-to-gloss model on the parallel
//! corpus, translate monolingual text into gloss hypotheses, splice feature
//! sequences from the bank, and mix the synthetic pairs into translation
//! training under a warm-up/ratio schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::SignBank;
use crate::corpus::ParallelSample;
use crate::error::{CorpusError, ModelError, Result};
use crate::metrics;
use crate::rng;
use crate::seq2seq::{
    beam_search, greedy_decode, DecodeParams, Seq2SeqModel, Source, SourceSeq, TrainPair,
    TrainParams, Trainer, TransformerConfig,
};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// One synthetic training pair. The text side is always a verbatim sentence
/// from the monolingual corpus; the features come from bank splicing (or are
/// all zeros for the blank-input control, in which case the hypothesis is
/// empty).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    /// Index of the source sentence in the monolingual corpus.
    pub origin: usize,
    pub text: Vec<u32>,
    pub gloss_hypothesis: Vec<u32>,
    pub features: Tensor,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MixSchedule {
    /// Epochs trained on parallel plus ALL synthetic pairs.
    pub warmup_epochs: usize,
    /// Synthetic:parallel ratio after warm-up.
    pub post_warmup_ratio: f64,
    /// Redraw the post-warm-up synthetic subset every epoch.
    pub resample_each_epoch: bool,
    /// Redraw each pair's bank pieces every epoch.
    pub resplice_each_epoch: bool,
}

impl Default for MixSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            post_warmup_ratio: 0.1,
            resample_each_epoch: true,
            resplice_each_epoch: true,
        }
    }
}

impl MixSchedule {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.post_warmup_ratio.is_finite() || self.post_warmup_ratio < 0.0 {
            return Err(ModelError::BadConfig(format!(
                "post_warmup_ratio {} must be a finite non-negative real",
                self.post_warmup_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct T2gReport {
    pub loss_trace: Vec<f64>,
    /// Gloss BLEU-4 on the held-out split, the quality measure for
    /// back-translators.
    pub heldout_bleu4: f64,
}

/// Trains the text-to-gloss network on (text, gloss) pairs from the parallel
/// corpus and grades it by gloss BLEU-4 on a held-out split.
pub fn train_t2g(
    samples: &[ParallelSample],
    heldout: &[ParallelSample],
    word_vocab: &Vocabulary,
    gloss_vocab: &Vocabulary,
    config: TransformerConfig,
    train: TrainParams,
    epochs: usize,
    decode: &DecodeParams,
) -> Result<(Seq2SeqModel, T2gReport)> {
    let pairs: Vec<TrainPair> = samples
        .iter()
        .map(|s| TrainPair { source: SourceSeq::Tokens(s.text.clone()), target: s.glosses.clone() })
        .collect();
    let model = Seq2SeqModel::new(
        config,
        crate::seq2seq::SourceMode::Token { vocab_size: word_vocab.len() },
        gloss_vocab.len(),
        train.seed,
    )?;
    let mut trainer = Trainer::new(model, train);
    if epochs > 0 {
        trainer.train(&pairs, epochs)?;
    }
    let heldout_bleu4 = if heldout.is_empty() {
        0.0
    } else {
        let hyps: Vec<Vec<u32>> = heldout
            .par_iter()
            .map(|s| {
                beam_search(&trainer.model, Source::Tokens(&s.text), decode)
                    .map(|(tokens, _)| tokens)
                    .unwrap_or_default()
            })
            .collect();
        let refs: Vec<Vec<u32>> = heldout.iter().map(|s| s.glosses.clone()).collect();
        metrics::bleu(&hyps, &refs)?.bleu[3]
    };
    Ok((trainer.model, T2gReport { loss_trace: trainer.loss_trace, heldout_bleu4 }))
}

/// One gloss hypothesis, tied to the monolingual sentence it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GlossHypothesis {
    pub origin: usize,
    pub glosses: Vec<u32>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BackTranslateStats {
    pub translated: usize,
    pub empty_dropped: usize,
}

/// Back-translates monolingual texts into gloss hypotheses, one per input,
/// dropping (and counting) empty hypotheses. Deterministic given the model
/// and parameters.
pub fn back_translate(
    t2g: &Seq2SeqModel,
    monolingual: &[Vec<u32>],
    params: &DecodeParams,
) -> Result<(Vec<GlossHypothesis>, BackTranslateStats)> {
    params.validate()?;
    let decoded: Vec<Vec<u32>> = monolingual
        .par_iter()
        .map(|text| beam_search(t2g, Source::Tokens(text), params).map(|(tokens, _)| tokens))
        .collect::<Result<_>>()?;
    let mut hyps = Vec::with_capacity(decoded.len());
    let mut stats = BackTranslateStats::default();
    for (origin, glosses) in decoded.into_iter().enumerate() {
        if glosses.is_empty() {
            stats.empty_dropped += 1;
            continue;
        }
        stats.translated += 1;
        hyps.push(GlossHypothesis { origin, glosses });
    }
    Ok((hyps, stats))
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SynthesisStats {
    pub kept: usize,
    /// Sentences dropped because a hypothesized gloss has no bank pieces.
    pub dropped_oov: usize,
    pub mean_feature_len: f64,
}

/// Splices one feature sequence per gloss hypothesis. Sentences containing
/// a gloss the bank does not cover are dropped whole and counted; drops are
/// data, not faults.
pub fn synthesize(
    hyps: &[GlossHypothesis],
    texts: &[Vec<u32>],
    bank: &SignBank,
    seed: u64,
) -> Result<(Vec<SyntheticPair>, SynthesisStats)> {
    let results: Vec<Option<SyntheticPair>> = hyps
        .par_iter()
        .map(|hyp| {
            if !bank.covers(&hyp.glosses) {
                return None;
            }
            let mut stream = rng::indexed_stream(seed, "splice", hyp.origin as u64);
            let features = bank.splice(&hyp.glosses, &mut stream).ok()?;
            Some(SyntheticPair {
                origin: hyp.origin,
                text: texts[hyp.origin].clone(),
                gloss_hypothesis: hyp.glosses.clone(),
                features,
            })
        })
        .collect();
    let mut pairs = Vec::with_capacity(results.len());
    let mut stats = SynthesisStats::default();
    let mut total_len = 0usize;
    for r in results {
        match r {
            Some(p) => {
                total_len += p.features.rows;
                pairs.push(p);
            }
            None => stats.dropped_oov += 1,
        }
    }
    stats.kept = pairs.len();
    stats.mean_feature_len =
        if pairs.is_empty() { 0.0 } else { total_len as f64 / pairs.len() as f64 };
    Ok((pairs, stats))
}

/// The worst-condition control: each text paired with an all-zeros feature
/// sequence of the given length.
pub fn blank_input_control(
    texts: &[Vec<u32>],
    feature_len: usize,
    feature_dim: usize,
) -> Vec<SyntheticPair> {
    texts
        .iter()
        .enumerate()
        .map(|(origin, text)| SyntheticPair {
            origin,
            text: text.clone(),
            gloss_hypothesis: Vec::new(),
            features: Tensor::zeros(feature_len, feature_dim),
        })
        .collect()
}

/// Re-splices a pair's features for a given epoch, or returns the stored
/// features when the pair has no hypothesis (blank input) or no bank is
/// available.
pub fn resplice_features(
    pair: &SyntheticPair,
    bank: Option<&SignBank>,
    seed: u64,
    epoch: usize,
) -> Tensor {
    match bank {
        Some(bank) if !pair.gloss_hypothesis.is_empty() => {
            let stream_id = ((epoch as u64) << 32) | pair.origin as u64;
            let mut stream = rng::indexed_stream(seed, "resplice", stream_id);
            bank.splice(&pair.gloss_hypothesis, &mut stream)
                .unwrap_or_else(|_| pair.features.clone())
        }
        _ => pair.features.clone(),
    }
}

/// Per-epoch accounting and dev quality during mixed training.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub n_parallel: usize,
    pub n_synthetic: usize,
    pub train_loss: f64,
    pub dev_bleu4: Option<f64>,
    pub dev_rouge_l: Option<f64>,
}

/// Decode inputs and references for per-epoch dev evaluation (greedy, to
/// keep epoch logging cheap; final reports use configured beam search).
pub struct EvalSet {
    pub sources: Vec<SourceSeq>,
    pub references: Vec<Vec<u32>>,
    pub max_len: usize,
}

impl EvalSet {
    pub fn greedy_bleu(&self, model: &Seq2SeqModel) -> Result<(f64, f64)> {
        let hyps: Vec<Vec<u32>> = self
            .sources
            .par_iter()
            .map(|s| greedy_decode(model, s.borrow(), self.max_len).map(|(t, _)| t))
            .collect::<Result<_>>()?;
        let report = metrics::bleu(&hyps, &self.references)?;
        let rouge = metrics::rouge_l(&hyps, &self.references)?;
        Ok((report.bleu[3], rouge))
    }
}

/// Mixed training: warm-up epochs see parallel plus all synthetic pairs;
/// afterwards each epoch samples `floor(ratio * |parallel|)` synthetic pairs
/// without replacement (redrawn per epoch) and re-splices their features.
/// Parallel and synthetic pairs are shuffled jointly inside the epoch.
#[allow(clippy::too_many_arguments)]
pub fn mixed_train(
    trainer: &mut Trainer,
    parallel: &[TrainPair],
    synthetic: &[SyntheticPair],
    bank: Option<&SignBank>,
    schedule: &MixSchedule,
    epochs: usize,
    seed: u64,
    dev: Option<&EvalSet>,
) -> Result<Vec<EpochLog>> {
    schedule.validate()?;
    if parallel.is_empty() {
        return Err(ModelError::NoTrainingData.into());
    }
    let mut log = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let epoch = trainer.epochs_done;
        let quota = if epoch < schedule.warmup_epochs {
            synthetic.len()
        } else {
            (((schedule.post_warmup_ratio * parallel.len() as f64).floor()) as usize)
                .min(synthetic.len())
        };
        let selected: Vec<usize> = if quota == synthetic.len() {
            (0..synthetic.len()).collect()
        } else if schedule.resample_each_epoch {
            // Without replacement within the epoch: a partial Fisher-Yates.
            let mut pool: Vec<usize> = (0..synthetic.len()).collect();
            let mut stream = rng::indexed_stream(seed, "synth-resample", epoch as u64);
            for i in 0..quota {
                let j = rand::Rng::gen_range(&mut stream, i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(quota);
            pool
        } else {
            (0..quota).collect()
        };

        let synth_pairs: Vec<TrainPair> = selected
            .par_iter()
            .map(|&idx| {
                let pair = &synthetic[idx];
                let features = if schedule.resplice_each_epoch {
                    resplice_features(pair, bank, seed, epoch)
                } else {
                    pair.features.clone()
                };
                TrainPair { source: SourceSeq::Features(features), target: pair.text.clone() }
            })
            .collect();

        let mut epoch_pairs = Vec::with_capacity(parallel.len() + synth_pairs.len());
        epoch_pairs.extend_from_slice(parallel);
        epoch_pairs.extend(synth_pairs);
        let n_parallel = parallel.len();
        let n_synthetic = epoch_pairs.len() - n_parallel;
        let train_loss = trainer.run_epoch(&epoch_pairs)?;

        let (dev_bleu4, dev_rouge_l) = match dev {
            Some(set) => {
                let (b, r) = set.greedy_bleu(&trainer.model)?;
                (Some(b), Some(r))
            }
            None => (None, None),
        };
        log.push(EpochLog { epoch, n_parallel, n_synthetic, train_loss, dev_bleu4, dev_rouge_l });
    }
    Ok(log)
}

#[derive(Serialize, Deserialize)]
struct RawSyntheticPair {
    id: String,
    origin: usize,
    frames: Vec<Vec<f64>>,
    glosses: Vec<String>,
    text: Vec<String>,
}

/// Writes synthetic pairs in the corpus JSONL record shape (features are
/// embedding-space, so the frame-count invariant of real corpora does not
/// apply here).
pub fn save_synthetic_pairs(
    pairs: &[SyntheticPair],
    gloss_vocab: &Vocabulary,
    word_vocab: &Vocabulary,
    path: &std::path::Path,
) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for p in pairs {
        let raw = RawSyntheticPair {
            id: format!("syn{:06}", p.origin),
            origin: p.origin,
            frames: (0..p.features.rows).map(|i| p.features.row(i).to_vec()).collect(),
            glosses: p
                .gloss_hypothesis
                .iter()
                .map(|&g| gloss_vocab.token(g).unwrap_or("?").to_string())
                .collect(),
            text: p.text.iter().map(|&w| word_vocab.token(w).unwrap_or("?").to_string()).collect(),
        };
        serde_json::to_writer(&mut out, &raw).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n").map_err(|e| CorpusError::io(path, e))?;
    }
    out.flush().map_err(|e| CorpusError::io(path, e))?;
    Ok(())
}

pub fn load_synthetic_pairs(
    path: &std::path::Path,
    gloss_vocab: &Vocabulary,
    word_vocab: &Vocabulary,
) -> Result<Vec<SyntheticPair>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSyntheticPair = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let map = |tokens: &[String], vocab: &Vocabulary| -> Result<Vec<u32>> {
            tokens
                .iter()
                .map(|t| {
                    vocab.id(t).ok_or_else(|| {
                        CorpusError::UnknownToken {
                            path: path.display().to_string(),
                            line: i + 1,
                            token: t.clone(),
                        }
                        .into()
                    })
                })
                .collect()
        };
        pairs.push(SyntheticPair {
            origin: raw.origin,
            text: map(&raw.text, word_vocab)?,
            gloss_hypothesis: map(&raw.glosses, gloss_vocab)?,
            features: Tensor::from_rows(&raw.frames),
        });
    }
    Ok(pairs)
}
