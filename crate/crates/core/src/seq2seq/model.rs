//! The encoder-decoder model: configuration, forward passes, checkpointing.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::container::Container;
use crate::error::{ContainerError, ModelError, Result};
use crate::nn::{self, DecoderLayer, DropoutCtx, EncoderLayer, LayerNormParams, Linear};
use crate::rng;
use crate::tensor::{log_softmax_row, softmax_row, Tensor};
use crate::vocab::{BOS, EOS};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    /// Desk-scale defaults: small enough to train on a CPU in minutes.
    pub fn desk() -> Self {
        Self { layers: 2, model_dim: 64, ff_dim: 256, heads: 4, dropout: 0.1 }
    }

    /// The reference setting: hidden 512, feed-forward 2048, 8 heads,
    /// dropout 0.1. Selectable for parity documentation, not for desk runs.
    pub fn reference() -> Self {
        Self { layers: 2, model_dim: 512, ff_dim: 2048, heads: 8, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 {
            return Err(ModelError::BadConfig("layers must be at least 1".into()));
        }
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// How the encoder consumes its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SourceMode {
    /// Token ids through a source embedding table.
    Token { vocab_size: usize },
    /// Feature vectors through a learned input projection.
    Feature { input_dim: usize },
}

/// Borrowed source input for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Tokens(&'a [u32]),
    Features(&'a Tensor),
}

/// Owned source sequence, as stored in training pairs.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceSeq {
    Tokens(Vec<u32>),
    Features(Tensor),
}

impl SourceSeq {
    pub fn borrow(&self) -> Source<'_> {
        match self {
            SourceSeq::Tokens(t) => Source::Tokens(t),
            SourceSeq::Features(f) => Source::Features(f),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SourceSeq::Tokens(t) => t.len(),
            SourceSeq::Features(f) => f.rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

enum SourceEmbed {
    Table(ParamId),
    Proj(Linear),
}

pub struct Seq2SeqModel {
    pub config: TransformerConfig,
    pub source_mode: SourceMode,
    pub target_vocab_size: usize,
    pub store: ParamStore,
    source_embed: SourceEmbed,
    target_embed: ParamId,
    enc_layers: Vec<EncoderLayer>,
    enc_ln: LayerNormParams,
    dec_layers: Vec<DecoderLayer>,
    dec_ln: LayerNormParams,
    out_proj: Linear,
}

impl Seq2SeqModel {
    pub fn new(
        config: TransformerConfig,
        source_mode: SourceMode,
        target_vocab_size: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if target_vocab_size == 0 {
            return Err(ModelError::BadConfig("target vocabulary is empty".into()).into());
        }
        let mut init_rng = rng::stream(seed, "seq2seq-init");
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let source_embed = match source_mode {
            SourceMode::Token { vocab_size } => SourceEmbed::Table(
                store.add("src.embed", nn::init_embedding(&mut init_rng, vocab_size, d)),
            ),
            SourceMode::Feature { input_dim } => {
                SourceEmbed::Proj(Linear::alloc(&mut store, "src.proj", input_dim, d, &mut init_rng))
            }
        };
        let target_embed =
            store.add("tgt.embed", nn::init_embedding(&mut init_rng, target_vocab_size, d));
        let enc_layers = (0..config.layers)
            .map(|l| EncoderLayer::alloc(&mut store, &format!("enc{l}"), d, config.ff_dim, &mut init_rng))
            .collect();
        let enc_ln = LayerNormParams::alloc(&mut store, "enc.ln", d);
        let dec_layers = (0..config.layers)
            .map(|l| DecoderLayer::alloc(&mut store, &format!("dec{l}"), d, config.ff_dim, &mut init_rng))
            .collect();
        let dec_ln = LayerNormParams::alloc(&mut store, "dec.ln", d);
        let out_proj = Linear::alloc(&mut store, "out", d, target_vocab_size, &mut init_rng);
        Ok(Self {
            config,
            source_mode,
            target_vocab_size,
            store,
            source_embed,
            target_embed,
            enc_layers,
            enc_ln,
            dec_layers,
            dec_ln,
            out_proj,
        })
    }

    fn check_source(&self, source: Source<'_>) -> Result<(), ModelError> {
        match (source, self.source_mode) {
            (Source::Tokens(t), SourceMode::Token { vocab_size }) => {
                if t.is_empty() {
                    return Err(ModelError::EmptyInput);
                }
                for &id in t {
                    if id as usize >= vocab_size {
                        return Err(ModelError::TokenOutOfRange { id, vocab: vocab_size });
                    }
                }
                Ok(())
            }
            (Source::Features(f), SourceMode::Feature { input_dim }) => {
                if f.rows == 0 {
                    return Err(ModelError::EmptyInput);
                }
                if f.cols != input_dim {
                    return Err(ModelError::DimMismatch { expected: input_dim, got: f.cols });
                }
                Ok(())
            }
            (Source::Tokens(_), SourceMode::Feature { input_dim }) => {
                Err(ModelError::DimMismatch { expected: input_dim, got: 0 })
            }
            (Source::Features(f), SourceMode::Token { .. }) => {
                Err(ModelError::DimMismatch { expected: 0, got: f.cols })
            }
        }
    }

    fn check_targets(&self, ids: &[u32]) -> Result<(), ModelError> {
        for &id in ids {
            if id as usize >= self.target_vocab_size {
                return Err(ModelError::TokenOutOfRange { id, vocab: self.target_vocab_size });
            }
        }
        Ok(())
    }

    pub(crate) fn encode_on_tape(
        &self,
        tape: &mut Tape,
        source: Source<'_>,
        dropout: &mut Option<DropoutCtx<'_, ChaCha8Rng>>,
    ) -> Result<Var> {
        self.check_source(source)?;
        let d = self.config.model_dim;
        let embedded = match (&self.source_embed, source) {
            (SourceEmbed::Table(table), Source::Tokens(ids)) => {
                let t = tape.param(&self.store, *table);
                let e = tape.embed(t, ids);
                tape.scale(e, (d as f64).sqrt())
            }
            (SourceEmbed::Proj(proj), Source::Features(frames)) => {
                let x = tape.input(frames.clone());
                proj.forward(tape, &self.store, x)
            }
            _ => unreachable!("mode checked above"),
        };
        let n = tape.value(embedded).rows;
        let pe = tape.input(nn::sinusoidal_pe(n, d));
        let mut x = tape.add(embedded, pe);
        x = super::train::maybe_dropout(tape, x, dropout);
        for layer in &self.enc_layers {
            x = layer.forward(tape, &self.store, x, self.config.heads, dropout);
        }
        Ok(self.enc_ln.forward(tape, &self.store, x))
    }

    pub(crate) fn decoder_logits_on_tape(
        &self,
        tape: &mut Tape,
        input_ids: &[u32],
        memory: Var,
        dropout: &mut Option<DropoutCtx<'_, ChaCha8Rng>>,
    ) -> Result<Var> {
        self.check_targets(input_ids)?;
        let d = self.config.model_dim;
        let table = tape.param(&self.store, self.target_embed);
        let e = tape.embed(table, input_ids);
        let e = tape.scale(e, (d as f64).sqrt());
        let pe = tape.input(nn::sinusoidal_pe(input_ids.len(), d));
        let mut x = tape.add(e, pe);
        x = super::train::maybe_dropout(tape, x, dropout);
        for layer in &self.dec_layers {
            x = layer.forward(tape, &self.store, x, memory, self.config.heads, dropout);
        }
        let x = self.dec_ln.forward(tape, &self.store, x);
        Ok(self.out_proj.forward(tape, &self.store, x))
    }

    /// Encoder hidden states in eval mode: one vector per source position.
    pub fn encode(&self, source: Source<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.encode_on_tape(&mut tape, source, &mut None)?;
        Ok(tape.value(h).clone())
    }

    /// All decoder output rows (raw logits) for a teacher-forced input.
    pub(crate) fn decoder_logits(&self, input_ids: &[u32], memory: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mem = tape.input(memory.clone());
        let logits = self.decoder_logits_on_tape(&mut tape, input_ids, mem, &mut None)?;
        Ok(tape.value(logits).clone())
    }

    /// Next-token distribution after `prefix` (which must begin with BOS),
    /// normalized to sum to one.
    pub fn decode_step(&self, prefix: &[u32], memory: &Tensor) -> Result<Vec<f64>> {
        if prefix.first() != Some(&BOS) {
            return Err(ModelError::BadPrefix.into());
        }
        let logits = self.decoder_logits(prefix, memory)?;
        let mut row = logits.row(logits.rows - 1).to_vec();
        softmax_row(&mut row);
        Ok(row)
    }

    /// Log of [`Seq2SeqModel::decode_step`], used by search.
    pub(crate) fn decode_step_log(&self, prefix: &[u32], memory: &Tensor) -> Result<Vec<f64>> {
        if prefix.first() != Some(&BOS) {
            return Err(ModelError::BadPrefix.into());
        }
        let logits = self.decoder_logits(prefix, memory)?;
        let mut row = logits.row(logits.rows - 1).to_vec();
        log_softmax_row(&mut row);
        Ok(row)
    }

    /// Teacher-forced conditional log-probability of `target`, which must
    /// end with EOS.
    pub fn sequence_log_prob(&self, source: Source<'_>, target: &[u32]) -> Result<f64> {
        if target.last() != Some(&EOS) {
            return Err(ModelError::TargetMissingEos.into());
        }
        self.check_targets(target)?;
        let memory = self.encode(source)?;
        let mut input = Vec::with_capacity(target.len());
        input.push(BOS);
        input.extend_from_slice(&target[..target.len() - 1]);
        let logits = self.decoder_logits(&input, &memory)?;
        let mut total = 0.0;
        for (u, &y) in target.iter().enumerate() {
            let mut row = logits.row(u).to_vec();
            log_softmax_row(&mut row);
            total += row[y as usize];
        }
        Ok(total)
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "source_mode": self.source_mode,
            "target_vocab_size": self.target_vocab_size,
        })
    }

    /// Saves model weights. Training state is saved by
    /// [`super::Trainer::save_checkpoint`], which includes optimizer moments.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container(serde_json::json!(null)).save(path)
    }

    pub(crate) fn to_container(&self, trainer_meta: serde_json::Value) -> Container {
        let mut meta = self.meta();
        meta["trainer"] = trainer_meta;
        let mut c = Container::new("seq2seq", meta);
        for id in self.store.ids() {
            c.push(self.store.name(id), self.store.get(id).clone());
        }
        c
    }

    pub(crate) fn from_container(c: &mut Container, path: &std::path::Path) -> Result<Self> {
        let parse = |v: serde_json::Value, what: &str| -> Result<serde_json::Value> {
            if v.is_null() {
                Err(ContainerError::BadHeader {
                    path: path.display().to_string(),
                    message: format!("missing {what}"),
                }
                .into())
            } else {
                Ok(v)
            }
        };
        let config: TransformerConfig =
            serde_json::from_value(parse(c.meta["config"].clone(), "config")?).map_err(|e| {
                ContainerError::BadHeader { path: path.display().to_string(), message: e.to_string() }
            })?;
        let source_mode: SourceMode = serde_json::from_value(parse(c.meta["source_mode"].clone(), "source_mode")?)
            .map_err(|e| ContainerError::BadHeader {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        let vocab = c.meta["target_vocab_size"].as_u64().ok_or_else(|| {
            ContainerError::BadHeader {
                path: path.display().to_string(),
                message: "missing target_vocab_size".into(),
            }
        })? as usize;
        let mut model = Self::new(config, source_mode, vocab, 0)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            *model.store.get_mut(id) = c.take_tensor(&name, path)?;
        }
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut c = Container::load(path, "seq2seq")?;
        Self::from_container(&mut c, path)
    }
}
