//! The sign embedding layer: a learned projection followed by two
//! conv-norm-relu stages, each max-pooled with stride 2, so a `T`-frame
//! input becomes `ceil(T/4)` embedding steps.
//!
//! Pretraining attaches a single transformer encoder layer and a linear
//! gloss classifier and trains the whole stack under CTC; the encoder and
//! classifier are kept only to produce gloss lattices for alignment and
//! greedy recognition, the embedding output is the conv stack alone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamId, ParamStore, Tape, Var};
use crate::corpus::ParallelSample;
use crate::ctc::{self, LogProbLattice};
use crate::error::{ModelError, Result};
use crate::metrics;
use crate::nn::{self, EncoderLayer, LayerNormParams, Linear};
use crate::optim::{Adam, AdamParams};
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Fixed gradient accumulation group size. Batches are split into groups of
/// this size computed in parallel and combined in order, so results do not
/// depend on the worker count.
pub const ACCUMULATION_GROUP: usize = 8;

pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedderConfig {
    /// Input frame dimension D.
    pub input_dim: usize,
    /// Embedding dimension. Desk-scale default 64; the reference setting
    /// is 512.
    pub hidden_dim: usize,
    /// Temporal convolution kernel width.
    pub kernel: usize,
    /// Feed-forward width of the pretraining encoder layer.
    pub encoder_ff: usize,
    pub encoder_heads: usize,
    /// Number of gloss classes (excluding the blank).
    pub num_classes: usize,
}

impl EmbedderConfig {
    pub fn desk(input_dim: usize, num_classes: usize) -> Self {
        Self { input_dim, hidden_dim: 64, kernel: 5, encoder_ff: 256, encoder_heads: 4, num_classes }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 {
            return Err(ModelError::BadConfig("hidden_dim must be at least 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::BadConfig("kernel must be odd".into()));
        }
        if self.hidden_dim % self.encoder_heads != 0 {
            return Err(ModelError::BadConfig("hidden_dim must be divisible by encoder_heads".into()));
        }
        if self.num_classes == 0 {
            return Err(ModelError::BadConfig("num_classes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Running normalization statistics for one conv stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn fresh(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    fn update(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvStage {
    w: ParamId,
    b: ParamId,
    norm_gamma: ParamId,
    norm_beta: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The trainable embedder plus its pretraining head.
#[derive(Debug, Clone)]
pub struct SignEmbedder {
    pub config: EmbedderConfig,
    pub store: ParamStore,
    proj: Linear,
    stage1: ConvStage,
    stage2: ConvStage,
    encoder: EncoderLayer,
    encoder_ln: LayerNormParams,
    classifier: Linear,
    pub stats1: RunningStats,
    pub stats2: RunningStats,
}

impl SignEmbedder {
    pub fn new(config: EmbedderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "embedder-init");
        let mut store = ParamStore::new();
        let h = config.hidden_dim;
        let proj = Linear::alloc(&mut store, "proj", config.input_dim, h, &mut rng);
        let alloc_stage = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| ConvStage {
            w: store.add(format!("{name}.w"), nn::init_linear(rng, config.kernel * h, h)),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, h)),
            norm_gamma: store.add(format!("{name}.norm.g"), Tensor::filled(1, h, 1.0)),
            norm_beta: store.add(format!("{name}.norm.b"), Tensor::zeros(1, h)),
        };
        let stage1 = alloc_stage(&mut store, "conv1", &mut rng);
        let stage2 = alloc_stage(&mut store, "conv2", &mut rng);
        let encoder = EncoderLayer::alloc(&mut store, "enc", h, config.encoder_ff, &mut rng);
        let encoder_ln = LayerNormParams::alloc(&mut store, "enc.ln", h);
        let classifier = Linear::alloc(&mut store, "cls", h, config.num_classes + 1, &mut rng);
        Ok(Self {
            config,
            store,
            proj,
            stage1,
            stage2,
            encoder,
            encoder_ln,
            classifier,
            stats1: RunningStats::fresh(h),
            stats2: RunningStats::fresh(h),
        })
    }

    fn check_frames(&self, frames: &Tensor) -> Result<(), ModelError> {
        if frames.rows < DOWNSAMPLE {
            return Err(ModelError::TooShort { got: frames.rows, min: DOWNSAMPLE });
        }
        if frames.cols != self.config.input_dim {
            return Err(ModelError::DimMismatch { expected: self.config.input_dim, got: frames.cols });
        }
        Ok(())
    }

    /// Conv-stack forward. In train mode, per-stage statistics over the time
    /// axis are used and returned; in eval mode the stored running statistics
    /// make the output a pure function of the input.
    fn embed_on_tape(
        &self,
        tape: &mut Tape,
        frames: Var,
        mode: Mode,
    ) -> (Var, Option<[(Vec<f64>, Vec<f64>); 2]>) {
        let stage = |tape: &mut Tape, x: Var, s: &ConvStage, running: &RunningStats| {
            let w = tape.param(&self.store, s.w);
            let b = tape.param(&self.store, s.b);
            let conv = tape.conv1d_same(x, w, b, self.config.kernel);
            let g = tape.param(&self.store, s.norm_gamma);
            let be = tape.param(&self.store, s.norm_beta);
            let (normed, batch) = match mode {
                Mode::Train => {
                    let (n, mean, var) = tape.batch_norm_cols(conv, g, be);
                    (n, Some((mean, var)))
                }
                Mode::Eval => (
                    tape.norm_cols_frozen(conv, g, be, running.mean.clone(), running.var.clone()),
                    None,
                ),
            };
            let act = tape.relu(normed);
            (tape.max_pool_pairs(act), batch)
        };
        let projected = self.proj.forward(tape, &self.store, frames);
        let (pooled1, batch1) = stage(tape, projected, &self.stage1, &self.stats1);
        let (pooled2, batch2) = stage(tape, pooled1, &self.stage2, &self.stats2);
        let stats = batch1.zip(batch2).map(|(a, b)| [a, b]);
        (pooled2, stats)
    }

    /// Embeds frames in eval mode: `T x D -> ceil(T/4) x hidden`.
    pub fn embed(&self, frames: &Tensor) -> Result<Tensor> {
        self.check_frames(frames)?;
        let mut tape = Tape::new();
        let x = tape.input(frames.clone());
        let (emb, _) = self.embed_on_tape(&mut tape, x, Mode::Eval);
        Ok(tape.value(emb).clone())
    }

    fn scores_on_tape(&self, tape: &mut Tape, emb: Var) -> Var {
        let n = tape.value(emb).rows;
        let pe = tape.input(nn::sinusoidal_pe(n, self.config.hidden_dim));
        let x = tape.add(emb, pe);
        let enc = self.encoder.forward::<ChaCha8Rng>(
            tape,
            &self.store,
            x,
            self.config.encoder_heads,
            &mut None,
        );
        let enc = self.encoder_ln.forward(tape, &self.store, enc);
        self.classifier.forward(tape, &self.store, enc)
    }

    /// Per-step gloss class log-probabilities (eval mode). Classes are dense
    /// indices `0..num_classes`, blank last.
    pub fn gloss_lattice(&self, frames: &Tensor) -> Result<LogProbLattice> {
        self.check_frames(frames)?;
        let mut tape = Tape::new();
        let x = tape.input(frames.clone());
        let (emb, _) = self.embed_on_tape(&mut tape, x, Mode::Eval);
        let scores = self.scores_on_tape(&mut tape, emb);
        Ok(LogProbLattice::from_scores(tape.value(scores)))
    }

    /// Best-path CTC readout: per-step argmax, collapse repeats, drop blanks.
    /// Returns dense class indices.
    pub fn predict_gloss_greedy(&self, frames: &Tensor) -> Result<Vec<u32>> {
        let lattice = self.gloss_lattice(frames)?;
        Ok(greedy_classes(&lattice))
    }

    fn params_meta(&self) -> serde_json::Value {
        serde_json::json!({ "config": self.config })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut c = crate::container::Container::new("embedder", self.params_meta());
        for id in self.store.ids() {
            c.push(self.store.name(id), self.store.get(id).clone());
        }
        let h = self.config.hidden_dim;
        c.push("stats1.mean", Tensor::from_vec(1, h, self.stats1.mean.clone()));
        c.push("stats1.var", Tensor::from_vec(1, h, self.stats1.var.clone()));
        c.push("stats2.mean", Tensor::from_vec(1, h, self.stats2.mean.clone()));
        c.push("stats2.var", Tensor::from_vec(1, h, self.stats2.var.clone()));
        c.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut c = crate::container::Container::load(path, "embedder")?;
        let config: EmbedderConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| crate::error::ContainerError::BadHeader {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        let mut model = Self::new(config, 0)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let tensor = c.take_tensor(&name, path)?;
            *model.store.get_mut(id) = tensor;
        }
        model.stats1.mean = c.take_tensor("stats1.mean", path)?.data;
        model.stats1.var = c.take_tensor("stats1.var", path)?.data;
        model.stats2.mean = c.take_tensor("stats2.mean", path)?.data;
        model.stats2.var = c.take_tensor("stats2.var", path)?.data;
        Ok(model)
    }
}

/// Greedy best-path decode of a lattice into collapsed class indices.
pub fn greedy_classes(lattice: &LogProbLattice) -> Vec<u32> {
    let blank = lattice.blank() as u32;
    let mut path = Vec::with_capacity(lattice.steps());
    for n in 0..lattice.steps() {
        let row = lattice.matrix().row(n);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i as u32)
            .unwrap();
        path.push(argmax);
    }
    ctc::collapse(&path, blank)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    /// Random 20% frame discard/copy plus a small temporal shift. Off by
    /// default so determinism tests see the raw corpus.
    pub augment: bool,
}

impl Default for PretrainParams {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            adam: AdamParams { lr: 1e-3, weight_decay: 1e-6, ..AdamParams::default() },
            seed: 0,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    /// Mean per-sample CTC loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Samples whose target cannot be emitted in their embedding length.
    pub excluded: Vec<String>,
    /// Greedy WER on the training subset after the final epoch.
    pub train_wer: f64,
}

fn class_targets(sample: &ParallelSample, vocab: &Vocabulary) -> Result<Vec<u32>, ModelError> {
    sample
        .glosses
        .iter()
        .map(|&g| {
            vocab
                .class_index(g)
                .ok_or(ModelError::TokenOutOfRange { id: g, vocab: vocab.len() })
        })
        .collect()
}

fn augment_frames(frames: &Tensor, min_rows: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut rows: Vec<usize> = Vec::with_capacity(frames.rows + frames.rows / 4);
    for t in 0..frames.rows {
        if rng.gen_bool(0.2) {
            if rng.gen_bool(0.5) {
                continue; // discard
            }
            rows.push(t); // copy
        }
        rows.push(t);
    }
    if rows.len() < min_rows {
        return frames.clone();
    }
    let mut out = Tensor::zeros(rows.len(), frames.cols);
    for (i, &src) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(frames.row(src));
    }
    out
}

/// Trains the embedder plus gloss head under CTC. Deterministic per seed for
/// any worker count: gradients are accumulated in fixed groups.
pub fn pretrain_sign_to_gloss(
    samples: &[ParallelSample],
    gloss_vocab: &Vocabulary,
    config: EmbedderConfig,
    params: &PretrainParams,
) -> Result<(SignEmbedder, PretrainReport)> {
    let mut model = SignEmbedder::new(config, params.seed)?;
    let mut optimizer = Adam::new(&model.store, params.adam);

    let mut usable: Vec<(usize, Vec<u32>)> = Vec::new();
    let mut excluded = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let Some(frames) = &s.frames else {
            excluded.push(s.id.clone());
            continue;
        };
        let target = class_targets(s, gloss_vocab)?;
        let steps = frames.rows.div_ceil(DOWNSAMPLE);
        if frames.rows < DOWNSAMPLE || steps < ctc::min_ctc_steps(&target) {
            excluded.push(s.id.clone());
            continue;
        }
        usable.push((i, target));
    }
    if usable.is_empty() {
        return Err(ModelError::NoTrainingData.into());
    }

    let mut loss_trace = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        let mut shuffle_rng = rng::indexed_stream(params.seed, "embedder-shuffle", epoch as u64);
        shuffle(&mut order, &mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch_size) {
            let jobs: Vec<(usize, &Vec<u32>)> =
                batch.iter().map(|&k| (usable[k].0, &usable[k].1)).collect();
            // Parallel over fixed-size groups, combined in order.
            let results: Vec<(f64, Grads, [(Vec<f64>, Vec<f64>); 2])> = jobs
                .par_chunks(ACCUMULATION_GROUP)
                .map(|group| {
                    group
                        .iter()
                        .map(|(idx, target)| {
                            let sample = &samples[*idx];
                            let frames = sample.frames.as_ref().unwrap();
                            let frames = if params.augment {
                                let mut arng = rng::indexed_stream(
                                    params.seed,
                                    "embedder-augment",
                                    (epoch * samples.len() + *idx) as u64,
                                );
                                augment_frames(
                                    frames,
                                    ctc::min_ctc_steps(target) * DOWNSAMPLE,
                                    &mut arng,
                                )
                            } else {
                                frames.clone()
                            };
                            let mut tape = Tape::new();
                            let x = tape.input(frames);
                            let (emb, stats) = model.embed_on_tape(&mut tape, x, Mode::Train);
                            let scores = model.scores_on_tape(&mut tape, emb);
                            let loss = tape
                                .ctc_loss(scores, target)
                                .expect("feasibility checked before training");
                            let loss_val = tape.value(loss).data[0];
                            let grads = tape.backward(loss, 1.0, model.store.len());
                            (loss_val, grads, stats.unwrap())
                        })
                        .collect::<Vec<_>>()
                })
                .flatten_iter()
                .collect();

            let mut batch_grads = Grads::zeros(model.store.len());
            for (loss, grads, stats) in results {
                epoch_loss += loss;
                batch_grads.accumulate(grads);
                model.stats1.update(&stats[0].0, &stats[0].1, 0.1);
                model.stats2.update(&stats[1].0, &stats[1].1, 0.1);
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            optimizer.step(&mut model.store, &batch_grads);
        }
        loss_trace.push(epoch_loss / usable.len() as f64);
    }

    // Greedy recognition quality on the training subset.
    let hyps: Vec<Vec<u32>> = usable
        .par_iter()
        .map(|(idx, _)| {
            model.predict_gloss_greedy(samples[*idx].frames.as_ref().unwrap()).unwrap_or_default()
        })
        .collect();
    let refs: Vec<Vec<u32>> = usable.iter().map(|(_, t)| t.clone()).collect();
    let train_wer = metrics::corpus_wer(&hyps, &refs).map(|b| b.wer).unwrap_or(1.0);

    Ok((model, PretrainReport { loss_trace, excluded, train_wer }))
}

/// Fisher-Yates with the toolkit's deterministic streams.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticLanguageSpec};

    fn tiny_spec() -> SyntheticLanguageSpec {
        SyntheticLanguageSpec {
            gloss_vocab_size: 4,
            word_vocab_size: 6,
            feature_dim: 5,
            gloss_duration_range: (4, 6),
            noise_std: 0.05,
            reorder_window: 0,
            function_word_rate: 0.0,
            sentence_length_range: (1, 3),
            seed: 3,
        }
    }

    #[test]
    fn embedding_length_is_ceil_t_over_4() {
        let config = EmbedderConfig { input_dim: 5, hidden_dim: 8, kernel: 5, encoder_ff: 16, encoder_heads: 2, num_classes: 4 };
        let model = SignEmbedder::new(config, 1).unwrap();
        for (t, n) in [(16usize, 4usize), (17, 5), (4, 1), (7, 2), (21, 6)] {
            let frames = Tensor::filled(t, 5, 0.3);
            let emb = model.embed(&frames).unwrap();
            assert_eq!(emb.rows, n, "T={t}");
            assert_eq!(emb.cols, 8);
        }
    }

    #[test]
    fn too_short_input_is_rejected() {
        let config = EmbedderConfig { input_dim: 5, hidden_dim: 8, kernel: 5, encoder_ff: 16, encoder_heads: 2, num_classes: 4 };
        let model = SignEmbedder::new(config, 1).unwrap();
        assert!(model.embed(&Tensor::filled(3, 5, 0.1)).is_err());
    }

    #[test]
    fn eval_mode_is_a_pure_function() {
        let config = EmbedderConfig { input_dim: 5, hidden_dim: 8, kernel: 5, encoder_ff: 16, encoder_heads: 2, num_classes: 4 };
        let model = SignEmbedder::new(config, 7).unwrap();
        let frames = Tensor::from_vec(9, 5, (0..45).map(|i| (i as f64 * 0.17).cos()).collect());
        assert_eq!(model.embed(&frames).unwrap(), model.embed(&frames).unwrap());
    }

    #[test]
    fn identical_inputs_embed_identically_and_noiseless_blocks_match() {
        // Two samples with the same gloss content and durations embed to the
        // same sequence under a fixed model.
        let mut spec = tiny_spec();
        spec.noise_std = 0.0;
        spec.gloss_duration_range = (4, 4);
        spec.sentence_length_range = (2, 2);
        let corpus = generate_synthetic_corpus(&spec, 30).unwrap();
        let config = EmbedderConfig { input_dim: 5, hidden_dim: 8, kernel: 5, encoder_ff: 16, encoder_heads: 2, num_classes: 4 };
        let model = SignEmbedder::new(config, 5).unwrap();
        // Find two distinct samples with identical gloss sequences.
        let mut pair = None;
        'outer: for i in 0..corpus.samples.len() {
            for j in i + 1..corpus.samples.len() {
                if corpus.samples[i].glosses == corpus.samples[j].glosses {
                    pair = Some((i, j));
                    break 'outer;
                }
            }
        }
        let (i, j) = pair.expect("30 draws over 16 gloss pairs must collide");
        let a = model.embed(corpus.samples[i].frames.as_ref().unwrap()).unwrap();
        let b = model.embed(corpus.samples[j].frames.as_ref().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_collapse_follows_ctc_rules() {
        // Hand-built lattices: argmax path [a,a,-,b] -> [a,b]; all-blank ->
        // empty; [a,-,a] -> [a,a].
        let lat = LogProbLattice::from_probs(&[
            vec![0.8, 0.1, 0.1],
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.2, 0.7],
            vec![0.1, 0.8, 0.1],
        ])
        .unwrap();
        assert_eq!(greedy_classes(&lat), vec![0, 1]);
        let blank = LogProbLattice::from_probs(&[vec![0.2, 0.2, 0.6], vec![0.1, 0.3, 0.6]]).unwrap();
        assert_eq!(greedy_classes(&blank), Vec::<u32>::new());
        let repeat = LogProbLattice::from_probs(&[
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.8, 0.1, 0.1],
        ])
        .unwrap();
        assert_eq!(greedy_classes(&repeat), vec![0, 0]);
    }

    #[test]
    fn zero_epochs_returns_initialized_model_with_empty_trace() {
        let corpus = generate_synthetic_corpus(&tiny_spec(), 8).unwrap();
        let config = EmbedderConfig { input_dim: 5, hidden_dim: 8, kernel: 5, encoder_ff: 16, encoder_heads: 2, num_classes: 4 };
        let params = PretrainParams { epochs: 0, seed: 11, ..Default::default() };
        let (model, report) =
            pretrain_sign_to_gloss(&corpus.samples, &corpus.gloss_vocab, config.clone(), &params)
                .unwrap();
        assert!(report.loss_trace.is_empty());
        let fresh = SignEmbedder::new(config, 11).unwrap();
        for id in fresh.store.ids() {
            assert_eq!(fresh.store.get(id), model.store.get(id));
        }
    }

    #[test]
    fn overfits_a_single_sample_to_zero_wer() {
        let mut spec = tiny_spec();
        spec.sentence_length_range = (1, 1);
        let corpus = generate_synthetic_corpus(&spec, 1).unwrap();
        let config = EmbedderConfig { input_dim: 5, hidden_dim: 8, kernel: 5, encoder_ff: 16, encoder_heads: 2, num_classes: 4 };
        let params = PretrainParams {
            epochs: 200,
            batch_size: 1,
            adam: AdamParams::with_lr(5e-3),
            seed: 2,
            augment: false,
        };
        let (_, report) =
            pretrain_sign_to_gloss(&corpus.samples, &corpus.gloss_vocab, config, &params).unwrap();
        assert_eq!(report.train_wer, 0.0, "loss trace: {:?}", &report.loss_trace[190..]);
    }

    #[test]
    fn pretraining_is_seed_deterministic() {
        let corpus = generate_synthetic_corpus(&tiny_spec(), 6).unwrap();
        let config = EmbedderConfig { input_dim: 5, hidden_dim: 8, kernel: 5, encoder_ff: 16, encoder_heads: 2, num_classes: 4 };
        let params = PretrainParams { epochs: 3, batch_size: 4, seed: 9, ..Default::default() };
        let (a, ra) =
            pretrain_sign_to_gloss(&corpus.samples, &corpus.gloss_vocab, config.clone(), &params)
                .unwrap();
        let (b, rb) =
            pretrain_sign_to_gloss(&corpus.samples, &corpus.gloss_vocab, config, &params).unwrap();
        assert_eq!(ra.loss_trace, rb.loss_trace);
        for id in a.store.ids() {
            assert_eq!(a.store.get(id), b.store.get(id));
        }
        assert_eq!(a.stats1, b.stats1);
    }

    #[test]
    fn infeasible_samples_are_excluded_with_names() {
        let mut corpus = generate_synthetic_corpus(&tiny_spec(), 4).unwrap();
        // Give sample 0 too many glosses for its frame count.
        let first = corpus.gloss_vocab.first_regular();
        corpus.samples[0].glosses = vec![first; 9];
        corpus.samples[0].frames = Some(Tensor::filled(8, 5, 0.2));
        let config = EmbedderConfig { input_dim: 5, hidden_dim: 8, kernel: 5, encoder_ff: 16, encoder_heads: 2, num_classes: 4 };
        let params = PretrainParams { epochs: 1, seed: 1, ..Default::default() };
        let (_, report) =
            pretrain_sign_to_gloss(&corpus.samples, &corpus.gloss_vocab, config, &params).unwrap();
        // Other samples may be excluded too (adjacent duplicates at minimum
        // duration are CTC-infeasible); the doctored one must be among them.
        assert!(report.excluded.contains(&corpus.samples[0].id), "{:?}", report.excluded);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let config = EmbedderConfig { input_dim: 5, hidden_dim: 8, kernel: 5, encoder_ff: 16, encoder_heads: 2, num_classes: 4 };
        let mut model = SignEmbedder::new(config, 13).unwrap();
        model.stats1.mean[2] = 0.25;
        model.stats2.var[5] = 3.5;
        let dir = std::env::temp_dir().join(format!("embedder-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("embedder.bin");
        model.save(&path).unwrap();
        let loaded = SignEmbedder::load(&path).unwrap();
        let frames = Tensor::from_vec(10, 5, (0..50).map(|i| (i as f64 * 0.31).sin()).collect());
        assert_eq!(model.embed(&frames).unwrap(), loaded.embed(&frames).unwrap());
        assert_eq!(model.stats1, loaded.stats1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn full_stack_gradient_matches_finite_differences() {
        // Whole embedder + encoder + classifier under CTC, double precision.
        let config = EmbedderConfig { input_dim: 3, hidden_dim: 4, kernel: 3, encoder_ff: 8, encoder_heads: 2, num_classes: 2 };
        let mut model = SignEmbedder::new(config, 21).unwrap();
        let frames = Tensor::from_vec(8, 3, (0..24).map(|i| (i as f64 * 0.7).sin() * 0.5).collect());
        let target = vec![0u32, 1];
        let run = |model: &SignEmbedder| -> (Tape, Var) {
            let mut tape = Tape::new();
            let x = tape.input(frames.clone());
            let (emb, _) = model.embed_on_tape(&mut tape, x, Mode::Train);
            let scores = model.scores_on_tape(&mut tape, emb);
            let loss = tape.ctc_loss(scores, &target).unwrap();
            (tape, loss)
        };
        let (mut tape, loss) = run(&model);
        let grads = tape.backward(loss, 1.0, model.store.len());
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for id in model.store.ids().collect::<Vec<_>>() {
            for i in 0..model.store.get(id).data.len() {
                let orig = model.store.get(id).data[i];
                model.store.get_mut(id).data[i] = orig + eps;
                let (t, l) = run(&model);
                let up = t.value(l).data[0];
                model.store.get_mut(id).data[i] = orig - eps;
                let (t, l) = run(&model);
                let down = t.value(l).data[0];
                model.store.get_mut(id).data[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let a = grads.by_param[id.0].as_ref().map_or(0.0, |g| g.data[i]);
                let denom = a.abs().max(fd.abs()).max(1e-4);
                worst = worst.max((a - fd).abs() / denom);
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }
}
