//! Shared plumbing between subcommands: artifact loading, corpus embedding,
//! decoding and report emission.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use signbt_core::backtranslation::EvalSet;
use signbt_core::corpus::ParallelSample;
use signbt_core::embedder::SignEmbedder;
use signbt_core::metrics::{self, WerBreakdown};
use signbt_core::seq2seq::{beam_search, DecodeParams, Seq2SeqModel, SourceSeq, TrainPair};
use signbt_core::tensor::Tensor;
use signbt_core::vocab::Vocabulary;

use crate::config::{ExperimentConfig, Task};

/// Points an error at the command that produces the missing artifact.
pub fn require_artifact(path: &Path, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "missing artifact {}: run `signbt {}` first",
            path.display(),
            producer
        );
    }
    Ok(())
}

pub struct Artifacts<'a> {
    pub config: &'a ExperimentConfig,
}

impl<'a> Artifacts<'a> {
    pub fn new(config: &'a ExperimentConfig) -> Self {
        Self { config }
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.config.paths.resolve(p)
    }

    pub fn vocabs(&self) -> Result<(Vocabulary, Vocabulary)> {
        let gloss_path = self.path(&self.config.paths.gloss_vocab);
        let word_path = self.path(&self.config.paths.word_vocab);
        require_artifact(&gloss_path, "generate")?;
        require_artifact(&word_path, "generate")?;
        let gloss = Vocabulary::load(&gloss_path)?;
        let word = Vocabulary::load(&word_path)?;
        Ok((gloss, word))
    }

    pub fn split(&self, split: Split, gloss: &Vocabulary, word: &Vocabulary) -> Result<Vec<ParallelSample>> {
        let rel = match split {
            Split::Train => &self.config.paths.train_corpus,
            Split::Dev => &self.config.paths.dev_corpus,
            Split::Test => &self.config.paths.test_corpus,
        };
        let path = self.path(rel);
        require_artifact(&path, "generate")?;
        Ok(signbt_core::corpus::load_corpus(&path, gloss, word)?)
    }

    pub fn embedder(&self) -> Result<(SignEmbedder, String)> {
        let path = self.path(&self.config.paths.embedder);
        require_artifact(&path, "train-embedder")?;
        let fingerprint = signbt_core::container::file_sha256(&path)?;
        Ok((SignEmbedder::load(&path)?, fingerprint))
    }

    pub fn bank(&self) -> Result<signbt_core::bank::SignBank> {
        let path = self.path(&self.config.paths.bank);
        require_artifact(&path, "build-bank")?;
        Ok(signbt_core::bank::SignBank::load(&path)?)
    }

    pub fn t2g_model(&self) -> Result<Seq2SeqModel> {
        let path = self.path(&self.config.paths.t2g_model);
        require_artifact(&path, "train-t2g")?;
        Ok(Seq2SeqModel::load(&path)?)
    }

    pub fn slt_model(&self) -> Result<Seq2SeqModel> {
        let path = self.path(&self.config.paths.slt_model);
        require_artifact(&path, "train-slt")?;
        Ok(Seq2SeqModel::load(&path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(anyhow!("unknown split `{other}` (train|dev|test)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// Embeds every sample's frames in parallel, preserving order.
pub fn embed_corpus(embedder: &SignEmbedder, samples: &[ParallelSample]) -> Result<Vec<Tensor>> {
    samples
        .par_iter()
        .map(|s| {
            let frames = s
                .frames
                .as_ref()
                .ok_or_else(|| anyhow!("sample {} has no frames", s.id))?;
            embedder.embed(frames).with_context(|| format!("embedding sample {}", s.id))
        })
        .collect()
}

/// Training pairs for the configured task.
pub fn task_pairs(
    task: Task,
    samples: &[ParallelSample],
    embedded: Option<&[Tensor]>,
) -> Result<Vec<TrainPair>> {
    match task {
        Task::S2T => {
            let embedded = embedded.ok_or_else(|| anyhow!("S2T needs embedded features"))?;
            Ok(samples
                .iter()
                .zip(embedded)
                .map(|(s, f)| TrainPair {
                    source: SourceSeq::Features(f.clone()),
                    target: s.text.clone(),
                })
                .collect())
        }
        Task::G2T => Ok(samples
            .iter()
            .map(|s| TrainPair { source: SourceSeq::Tokens(s.glosses.clone()), target: s.text.clone() })
            .collect()),
        Task::T2G => Ok(samples
            .iter()
            .map(|s| TrainPair { source: SourceSeq::Tokens(s.text.clone()), target: s.glosses.clone() })
            .collect()),
        Task::S2G2T => bail!("S2G2T is an evaluation pipeline; train a G2T model instead"),
    }
}

/// Dev-set decode inputs for per-epoch logging.
pub fn eval_set(
    task: Task,
    samples: &[ParallelSample],
    embedded: Option<&[Tensor]>,
    max_len: usize,
) -> Result<EvalSet> {
    let pairs = task_pairs(task, samples, embedded)?;
    Ok(EvalSet {
        sources: pairs.iter().map(|p| p.source.clone()).collect(),
        references: pairs.into_iter().map(|p| p.target).collect(),
        max_len,
    })
}

pub struct DecodedCorpus {
    pub ids: Vec<String>,
    pub hypotheses: Vec<Vec<u32>>,
    pub scores: Vec<f64>,
    pub references: Vec<Vec<u32>>,
    /// Intermediate gloss WER for the two-stage pipeline.
    pub s2g_wer: Option<WerBreakdown>,
}

/// Decodes a split under the configured task.
pub fn decode_corpus(
    task: Task,
    samples: &[ParallelSample],
    embedder: Option<&SignEmbedder>,
    model: &Seq2SeqModel,
    gloss_vocab: &Vocabulary,
    params: &DecodeParams,
) -> Result<DecodedCorpus> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let (sources, references, s2g_wer): (Vec<SourceSeq>, Vec<Vec<u32>>, Option<WerBreakdown>) =
        match task {
            Task::S2T => {
                let embedder = embedder.ok_or_else(|| anyhow!("S2T evaluation needs the embedder"))?;
                let embedded = embed_corpus(embedder, samples)?;
                (
                    embedded.into_iter().map(SourceSeq::Features).collect(),
                    samples.iter().map(|s| s.text.clone()).collect(),
                    None,
                )
            }
            Task::S2G2T => {
                let embedder = embedder.ok_or_else(|| anyhow!("S2G2T evaluation needs the embedder"))?;
                let recognized: Vec<Vec<u32>> = samples
                    .par_iter()
                    .map(|s| {
                        let frames = s.frames.as_ref().ok_or_else(|| anyhow!("{} has no frames", s.id))?;
                        let classes = embedder.predict_gloss_greedy(frames)?;
                        Ok(classes.into_iter().map(|c| gloss_vocab.id_of_class(c)).collect())
                    })
                    .collect::<Result<_>>()?;
                let gold: Vec<Vec<u32>> = samples.iter().map(|s| s.glosses.clone()).collect();
                let wer = metrics::corpus_wer(&recognized, &gold)?;
                (
                    recognized.into_iter().map(SourceSeq::Tokens).collect(),
                    samples.iter().map(|s| s.text.clone()).collect(),
                    Some(wer),
                )
            }
            Task::T2G => (
                samples.iter().map(|s| SourceSeq::Tokens(s.text.clone())).collect(),
                samples.iter().map(|s| s.glosses.clone()).collect(),
                None,
            ),
            Task::G2T => (
                samples.iter().map(|s| SourceSeq::Tokens(s.glosses.clone())).collect(),
                samples.iter().map(|s| s.text.clone()).collect(),
                None,
            ),
        };

    let decoded: Vec<(Vec<u32>, f64)> = sources
        .par_iter()
        .map(|s| beam_search(model, s.borrow(), params).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let (hypotheses, scores): (Vec<_>, Vec<_>) = decoded.into_iter().unzip();
    Ok(DecodedCorpus { ids, hypotheses, scores, references, s2g_wer })
}

/// The metric recipe stamped on every report so numbers are comparable.
#[derive(Serialize)]
pub struct Recipe {
    pub bleu: &'static str,
    pub rouge: &'static str,
    pub wer: &'static str,
    pub references: &'static str,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            bleu: "corpus-level, n-grams 1-4, clipped modified precision, add-epsilon 1e-9 on zero precisions, BP exp(1-r/c) for c<=r",
            rouge: "sentence-level ROUGE-L F1 (beta=1), corpus mean",
            wer: "(S+D+I)/ref-length under minimum edit distance; backtrace prefers substitution, deletion, insertion",
            references: "single reference per hypothesis",
        }
    }
}

#[derive(Serialize)]
pub struct EvalReport {
    pub task: String,
    pub split: String,
    pub n_sentences: usize,
    pub rouge_l: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub brevity_penalty: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<WerBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s2g_wer: Option<WerBreakdown>,
    pub decode: crate::config::DecodeConfig,
    pub recipe: Recipe,
}

/// Computes metrics and writes report.json, report.txt and hyps.jsonl.
pub fn write_eval_report(
    task: Task,
    split: Split,
    decoded: &DecodedCorpus,
    target_vocab: &Vocabulary,
    decode_config: &crate::config::DecodeConfig,
    report_dir: &Path,
) -> Result<(EvalReport, Vec<PathBuf>)> {
    std::fs::create_dir_all(report_dir)?;
    let bleu = metrics::bleu(&decoded.hypotheses, &decoded.references)?;
    let rouge = metrics::rouge_l(&decoded.hypotheses, &decoded.references)?;
    // WER is the headline metric only for gloss prediction tasks.
    let wer = matches!(task, Task::T2G)
        .then(|| metrics::corpus_wer(&decoded.hypotheses, &decoded.references))
        .transpose()?;

    let task_name = format!("{task:?}");
    let report = EvalReport {
        task: task_name.clone(),
        split: split.to_string(),
        n_sentences: decoded.hypotheses.len(),
        rouge_l: rouge,
        bleu1: bleu.bleu[0],
        bleu2: bleu.bleu[1],
        bleu3: bleu.bleu[2],
        bleu4: bleu.bleu[3],
        brevity_penalty: bleu.brevity_penalty,
        wer,
        s2g_wer: decoded.s2g_wer,
        decode: decode_config.clone(),
        recipe: Recipe::default(),
    };

    let stem = format!("{}-{}", task_name.to_lowercase(), split);
    let json_path = report_dir.join(format!("{stem}-report.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;

    let mut table = String::new();
    table.push_str(&format!("# {} on {} ({} sentences)\n", task_name, split, report.n_sentences));
    let r = Recipe::default();
    table.push_str(&format!("# BLEU: {}\n# ROUGE: {}\n# WER: {}\n# {}\n", r.bleu, r.rouge, r.wer, r.references));
    table.push_str(&format!(
        "# decode: beam_width={} alpha={} max_len={}\n",
        decode_config.beam_width, decode_config.length_penalty_alpha, decode_config.max_len
    ));
    table.push_str("| Task  | R     | B-1   | B-2   | B-3   | B-4   |\n");
    table.push_str(&format!(
        "| {:<5} | {:>5.2} | {:>5.2} | {:>5.2} | {:>5.2} | {:>5.2} |\n",
        task_name, report.rouge_l, report.bleu1, report.bleu2, report.bleu3, report.bleu4
    ));
    if let Some(w) = &report.wer {
        table.push_str("| Task  | del   | ins   | sub   | WER   |\n");
        table.push_str(&format!(
            "| {:<5} | {:>5} | {:>5} | {:>5} | {:>5.2} |\n",
            task_name,
            w.deletions,
            w.insertions,
            w.substitutions,
            100.0 * w.wer
        ));
    }
    if let Some(w) = &report.s2g_wer {
        table.push_str(&format!(
            "# intermediate S2G: del {} / ins {} / sub {} / WER {:.2}\n",
            w.deletions,
            w.insertions,
            w.substitutions,
            100.0 * w.wer
        ));
    }
    let txt_path = report_dir.join(format!("{stem}-report.txt"));
    std::fs::write(&txt_path, table)?;

    let mut hyp_lines = String::new();
    for ((id, hyp), score) in decoded.ids.iter().zip(&decoded.hypotheses).zip(&decoded.scores) {
        let line = serde_json::json!({
            "id": id,
            "hypothesis": target_vocab.decode(hyp),
            "score": score,
        });
        hyp_lines.push_str(&line.to_string());
        hyp_lines.push('\n');
    }
    let hyp_path = report_dir.join(format!("{stem}-hyps.jsonl"));
    std::fs::write(&hyp_path, hyp_lines)?;

    Ok((report, vec![json_path, txt_path, hyp_path]))
}
