//! Training loop: label-smoothed cross-entropy, Adam, deterministic
//! shuffling and dropout streams, resumable checkpoints.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape, Var};
use crate::container::Container;
use crate::error::{ContainerError, ModelError, Result};
use crate::nn::DropoutCtx;
use crate::optim::{Adam, AdamParams};
use crate::rng;
use crate::vocab::{BOS, EOS};

use super::model::{Seq2SeqModel, SourceSeq};

/// Fixed gradient accumulation group size; see the embedder for the same
/// contract. Results are identical for any worker count.
pub const ACCUMULATION_GROUP: usize = 8;

/// One training example. `target` carries plain token ids; BOS/EOS framing
/// is added by the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub source: SourceSeq,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub batch_size: usize,
    pub adam: AdamParams,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            batch_size: 32,
            adam: AdamParams::default(),
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

pub(crate) fn maybe_dropout(
    tape: &mut Tape,
    x: Var,
    ctx: &mut Option<DropoutCtx<'_, ChaCha8Rng>>,
) -> Var {
    match ctx {
        Some(c) if c.rate > 0.0 => {
            let len = tape.value(x).data.len();
            let keep = 1.0 - c.rate;
            let mask: Vec<f64> = (0..len)
                .map(|_| if rand::Rng::gen_bool(c.rng, keep) { 1.0 / keep } else { 0.0 })
                .collect();
            tape.dropout(x, mask)
        }
        _ => x,
    }
}

/// A model under training: weights, optimizer moments and the epoch cursor.
/// Checkpoints round-trip the whole state so resumed training reproduces
/// uninterrupted training step for step.
pub struct Trainer {
    pub model: Seq2SeqModel,
    pub optimizer: Adam,
    pub params: TrainParams,
    pub epochs_done: usize,
    pub loss_trace: Vec<f64>,
}

impl Trainer {
    pub fn new(model: Seq2SeqModel, params: TrainParams) -> Self {
        let optimizer = Adam::new(&model.store, params.adam);
        Self { model, optimizer, params, epochs_done: 0, loss_trace: Vec::new() }
    }

    /// Runs one epoch over `pairs`. Shuffling and dropout derive from the
    /// seed and the epoch counter, not from call history, so epoch k is the
    /// same whether or not training was interrupted before it.
    pub fn run_epoch(&mut self, pairs: &[TrainPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(ModelError::NoTrainingData.into());
        }
        let epoch = self.epochs_done;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut shuffle_rng = rng::indexed_stream(self.params.seed, "s2s-shuffle", epoch as u64);
        crate::embedder::shuffle(&mut order, &mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(self.params.batch_size) {
            let results: Vec<(f64, usize, Grads)> = batch
                .par_chunks(ACCUMULATION_GROUP)
                .map(|group| {
                    group
                        .iter()
                        .map(|&idx| self.sample_loss_and_grads(&pairs[idx], epoch, idx))
                        .collect::<Vec<_>>()
                })
                .flatten_iter()
                .collect();
            let mut batch_grads = Grads::zeros(self.model.store.len());
            let mut batch_tokens = 0usize;
            for (loss, tokens, grads) in results {
                epoch_loss += loss;
                batch_tokens += tokens;
                batch_grads.accumulate(grads);
            }
            epoch_tokens += batch_tokens;
            // Mean over the batch's tokens.
            batch_grads.scale(1.0 / batch_tokens as f64);
            self.optimizer.step(&mut self.model.store, &batch_grads);
        }
        let mean = epoch_loss / epoch_tokens as f64;
        self.loss_trace.push(mean);
        self.epochs_done += 1;
        Ok(mean)
    }

    fn sample_loss_and_grads(&self, pair: &TrainPair, epoch: usize, index: usize) -> (f64, usize, Grads) {
        let mut input = Vec::with_capacity(pair.target.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&pair.target);
        let mut targets = pair.target.clone();
        targets.push(EOS);
        let mask = vec![true; targets.len()];

        let mut dropout_rng = rng::indexed_stream(
            self.params.seed,
            "s2s-dropout",
            (epoch as u64) << 32 | index as u64,
        );
        let mut tape = Tape::new();
        let (loss, tokens, grads) = {
            let mut ctx = (self.model.config.dropout > 0.0).then_some(DropoutCtx {
                rng: &mut dropout_rng,
                rate: self.model.config.dropout,
            });
            let memory = self
                .model
                .encode_on_tape(&mut tape, pair.source.borrow(), &mut ctx)
                .expect("training pair validated");
            let logits = self
                .model
                .decoder_logits_on_tape(&mut tape, &input, memory, &mut ctx)
                .expect("training pair validated");
            let (loss, tokens) = tape.smoothed_cross_entropy(
                logits,
                &targets,
                &mask,
                self.params.label_smoothing,
            );
            let loss_val = tape.value(loss).data[0];
            let grads = tape.backward(loss, 1.0, self.model.store.len());
            (loss_val, tokens, grads)
        };
        (loss, tokens, grads)
    }

    /// Trains for `epochs` additional epochs, returning mean loss per epoch
    /// in nats per token.
    pub fn train(&mut self, pairs: &[TrainPair], epochs: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            out.push(self.run_epoch(pairs)?);
        }
        Ok(out)
    }

    /// Saves weights, optimizer moments and the epoch cursor.
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let trainer_meta = serde_json::json!({
            "params": self.params,
            "epochs_done": self.epochs_done,
            "loss_trace": self.loss_trace,
            "adam_step": self.optimizer.step_count(),
        });
        let mut c = self.model.to_container(trainer_meta);
        let (_, m, v) = self.optimizer.state();
        for (id, tensor) in self.model.store.ids().zip(m) {
            c.push(format!("opt.m.{}", self.model.store.name(id)), tensor.clone());
        }
        for (id, tensor) in self.model.store.ids().zip(v) {
            c.push(format!("opt.v.{}", self.model.store.name(id)), tensor.clone());
        }
        c.save(path)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let mut c = Container::load(path, "seq2seq")?;
        let model = Seq2SeqModel::from_container(&mut c, path)?;
        let trainer_meta = c.meta["trainer"].clone();
        if trainer_meta.is_null() {
            return Err(ModelError::NoOptimizerState.into());
        }
        let params: TrainParams =
            serde_json::from_value(trainer_meta["params"].clone()).map_err(|e| {
                ContainerError::BadHeader { path: path.display().to_string(), message: e.to_string() }
            })?;
        let epochs_done = trainer_meta["epochs_done"].as_u64().unwrap_or(0) as usize;
        let loss_trace: Vec<f64> =
            serde_json::from_value(trainer_meta["loss_trace"].clone()).unwrap_or_default();
        let adam_step = trainer_meta["adam_step"].as_u64().unwrap_or(0);
        let mut optimizer = Adam::new(&model.store, params.adam);
        let mut m = Vec::new();
        let mut v = Vec::new();
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            m.push(c.take_tensor(&format!("opt.m.{name}"), path)?);
            v.push(c.take_tensor(&format!("opt.v.{name}"), path)?);
        }
        optimizer.restore(adam_step, m, v);
        Ok(Self { model, optimizer, params, epochs_done, loss_trace })
    }
}

/// Closed-form minimum of the label-smoothed cross entropy: the entropy of
/// the smoothed target distribution.
pub fn smoothing_floor(epsilon: f64, vocab_size: usize) -> f64 {
    let v = vocab_size as f64;
    let on = 1.0 - epsilon + epsilon / v;
    let off = epsilon / v;
    let mut h = -on * on.ln();
    if epsilon > 0.0 {
        h -= (v - 1.0) * off * off.ln();
    }
    h
}
