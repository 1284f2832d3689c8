//! One function per subcommand. Every command writes its artifact plus a
//! run manifest into the report directory.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use signbt_core::backtranslation::{
    self, blank_input_control, GlossHypothesis, MixSchedule, SyntheticPair,
};
use signbt_core::bank::{build_bank, SignBank};
use signbt_core::container::Container;
use signbt_core::corpus::{self, generate_monolingual, generate_synthetic_corpus};
use signbt_core::ctc;
use signbt_core::embedder::{pretrain_sign_to_gloss, EmbedderConfig, PretrainParams};
use signbt_core::optim::AdamParams;
use signbt_core::seq2seq::{Seq2SeqModel, SourceMode, Trainer};

use crate::config::{ExperimentConfig, Task};
use crate::manifest::ManifestBuilder;
use crate::pipeline::{self, Artifacts, Split};

fn ensure_parent(path: &PathBuf) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

pub fn generate(config: &ExperimentConfig) -> Result<()> {
    let mut manifest = ManifestBuilder::new("generate", config.seed, config.canonical_json());
    let art = Artifacts::new(config);
    std::fs::create_dir_all(&config.paths.work_dir)?;

    let spec = config.language.to_spec(config.seed);
    let g = &config.generate;
    let total = g.train + g.dev + g.test;
    let corpus = generate_synthetic_corpus(&spec, total)?;
    let (mono_texts, _) = generate_monolingual(&spec, g.monolingual)?;

    let splits = [
        (&config.paths.train_corpus, 0, g.train),
        (&config.paths.dev_corpus, g.train, g.train + g.dev),
        (&config.paths.test_corpus, g.train + g.dev, total),
    ];
    for (rel, lo, hi) in splits {
        let path = art.path(rel);
        ensure_parent(&path)?;
        corpus::save_corpus(&corpus.samples[lo..hi], &corpus.gloss_vocab, &corpus.word_vocab, &path)?;
        manifest.output(&path);
    }

    let mono_path = art.path(&config.paths.monolingual);
    corpus::save_monolingual(&mono_texts, &corpus.word_vocab, &mono_path)?;
    manifest.output(&mono_path);

    let gloss_path = art.path(&config.paths.gloss_vocab);
    corpus.gloss_vocab.save(&gloss_path)?;
    manifest.output(&gloss_path);
    let word_path = art.path(&config.paths.word_vocab);
    corpus.word_vocab.save(&word_path)?;
    manifest.output(&word_path);

    let proto_path = art.path(&config.paths.prototypes);
    let mut proto = Container::new("prototypes", serde_json::json!({ "seed": config.seed }));
    proto.push("prototypes", corpus.prototypes.clone());
    proto.save(&proto_path)?;
    manifest.output(&proto_path);

    manifest.write(&config.paths.report_dir())?;
    println!(
        "generated {} train / {} dev / {} test parallel pairs, {} monolingual sentences",
        g.train, g.dev, g.test, g.monolingual
    );
    Ok(())
}

pub fn train_embedder(config: &ExperimentConfig) -> Result<()> {
    let mut manifest = ManifestBuilder::new("train-embedder", config.seed, config.canonical_json());
    let art = Artifacts::new(config);
    let (gloss_vocab, word_vocab) = art.vocabs()?;
    let train = art.split(Split::Train, &gloss_vocab, &word_vocab)?;
    manifest.input(&art.path(&config.paths.train_corpus))?;

    let e = &config.embedder;
    let embedder_config = EmbedderConfig {
        input_dim: config.language.feature_dim,
        hidden_dim: e.hidden_dim,
        kernel: e.kernel,
        encoder_ff: e.encoder_ff,
        encoder_heads: e.encoder_heads,
        num_classes: gloss_vocab.regular_len(),
    };
    let params = PretrainParams {
        epochs: e.epochs,
        batch_size: e.batch_size,
        adam: AdamParams { lr: e.lr, weight_decay: e.weight_decay, ..AdamParams::default() },
        seed: config.seed,
        augment: e.augment,
    };
    let (model, report) = pretrain_sign_to_gloss(&train, &gloss_vocab, embedder_config, &params)?;

    let out = art.path(&config.paths.embedder);
    ensure_parent(&out)?;
    model.save(&out)?;
    manifest.output(&out);

    let report_dir = config.paths.report_dir();
    std::fs::create_dir_all(&report_dir)?;
    let report_path = report_dir.join("embedder-report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    manifest.output(&report_path);
    manifest.write(&report_dir)?;
    println!(
        "embedder trained: final loss {:.4}, train WER {:.2}%, excluded {}",
        report.loss_trace.last().copied().unwrap_or(f64::NAN),
        100.0 * report.train_wer,
        report.excluded.len()
    );
    Ok(())
}

pub fn align(config: &ExperimentConfig) -> Result<()> {
    let mut manifest = ManifestBuilder::new("align", config.seed, config.canonical_json());
    let art = Artifacts::new(config);
    let (gloss_vocab, word_vocab) = art.vocabs()?;
    let train = art.split(Split::Train, &gloss_vocab, &word_vocab)?;
    let (embedder, _) = art.embedder()?;
    manifest.input(&art.path(&config.paths.train_corpus))?;
    manifest.input(&art.path(&config.paths.embedder))?;

    let mut lines = String::new();
    let mut skipped = 0usize;
    for sample in &train {
        let Some(frames) = &sample.frames else {
            skipped += 1;
            continue;
        };
        let classes: Option<Vec<u32>> =
            sample.glosses.iter().map(|&g| gloss_vocab.class_index(g)).collect();
        let (Some(classes), Ok(lattice)) = (classes, embedder.gloss_lattice(frames)) else {
            skipped += 1;
            continue;
        };
        match ctc::constrained_viterbi(&lattice, &classes) {
            Ok((path, log_prob)) => {
                let spans = ctc::path_to_spans(&path, &sample.id);
                let json_spans: Vec<serde_json::Value> = spans
                    .iter()
                    .map(|s| {
                        serde_json::json!({
                            "gloss": gloss_vocab.token(gloss_vocab.id_of_class(s.label)),
                            "start": s.start,
                            "end": s.end,
                        })
                    })
                    .collect();
                let line = serde_json::json!({
                    "id": sample.id,
                    "log_prob": log_prob,
                    "spans": json_spans,
                });
                lines.push_str(&line.to_string());
                lines.push('\n');
            }
            Err(_) => skipped += 1,
        }
    }
    let out = art.path(&config.paths.alignments);
    ensure_parent(&out)?;
    std::fs::write(&out, lines)?;
    manifest.output(&out);
    manifest.write(&config.paths.report_dir())?;
    println!("aligned {} samples ({} skipped)", train.len() - skipped, skipped);
    Ok(())
}

pub fn cmd_build_bank(config: &ExperimentConfig) -> Result<()> {
    let mut manifest = ManifestBuilder::new("build-bank", config.seed, config.canonical_json());
    let art = Artifacts::new(config);
    let (gloss_vocab, word_vocab) = art.vocabs()?;
    let train = art.split(Split::Train, &gloss_vocab, &word_vocab)?;
    let (embedder, fingerprint) = art.embedder()?;
    manifest.input(&art.path(&config.paths.train_corpus))?;
    manifest.input(&art.path(&config.paths.embedder))?;

    let (bank, coverage) = build_bank(&train, &embedder, &gloss_vocab, &fingerprint)?;
    let out = art.path(&config.paths.bank);
    ensure_parent(&out)?;
    bank.save(&out)?;
    manifest.output(&out);

    let report_dir = config.paths.report_dir();
    std::fs::create_dir_all(&report_dir)?;
    let coverage_path = report_dir.join("bank-coverage.json");
    std::fs::write(&coverage_path, serde_json::to_string_pretty(&coverage)?)?;
    manifest.output(&coverage_path);
    manifest.write(&report_dir)?;
    println!(
        "bank built: {} glosses covered, {} missing, {} samples skipped",
        coverage.pieces_per_gloss.values().filter(|&&c| c > 0).count(),
        coverage.missing.len(),
        coverage.skipped.len()
    );
    Ok(())
}

pub fn train_t2g(config: &ExperimentConfig) -> Result<()> {
    let mut manifest = ManifestBuilder::new("train-t2g", config.seed, config.canonical_json());
    let art = Artifacts::new(config);
    let (gloss_vocab, word_vocab) = art.vocabs()?;
    let train = art.split(Split::Train, &gloss_vocab, &word_vocab)?;
    let dev = art.split(Split::Dev, &gloss_vocab, &word_vocab)?;
    manifest.input(&art.path(&config.paths.train_corpus))?;
    manifest.input(&art.path(&config.paths.dev_corpus))?;

    let (model, report) = backtranslation::train_t2g(
        &train,
        &dev,
        &word_vocab,
        &gloss_vocab,
        config.model.to_core(),
        config.t2g.to_params(config.seed),
        config.t2g.epochs,
        &config.decode.to_core(),
    )?;
    let out = art.path(&config.paths.t2g_model);
    ensure_parent(&out)?;
    model.save(&out)?;
    manifest.output(&out);

    let report_dir = config.paths.report_dir();
    std::fs::create_dir_all(&report_dir)?;
    let report_path = report_dir.join("t2g-report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    manifest.output(&report_path);
    manifest.write(&report_dir)?;
    println!("t2g trained: held-out gloss BLEU-4 {:.2}", report.heldout_bleu4);
    Ok(())
}

pub fn backtranslate(config: &ExperimentConfig) -> Result<()> {
    let mut manifest = ManifestBuilder::new("backtranslate", config.seed, config.canonical_json());
    let art = Artifacts::new(config);
    let (gloss_vocab, word_vocab) = art.vocabs()?;
    let mono_path = art.path(&config.paths.monolingual);
    pipeline::require_artifact(&mono_path, "generate")?;
    let (texts, stats) =
        corpus::load_monolingual(&mono_path, &word_vocab, config.language.tokenization)?;
    let t2g = art.t2g_model()?;
    manifest.input(&mono_path)?;
    manifest.input(&art.path(&config.paths.t2g_model))?;

    let (hyps, bt_stats) = backtranslation::back_translate(&t2g, &texts, &config.decode.to_core())?;
    let mut lines = String::new();
    for hyp in &hyps {
        let tokens: Vec<&str> =
            hyp.glosses.iter().map(|&g| gloss_vocab.token(g).unwrap_or("?")).collect();
        let line = serde_json::json!({ "origin": hyp.origin, "glosses": tokens });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    let out = art.path(&config.paths.gloss_hyps);
    ensure_parent(&out)?;
    std::fs::write(&out, lines)?;
    manifest.output(&out);

    let report_dir = config.paths.report_dir();
    std::fs::create_dir_all(&report_dir)?;
    let stats_path = report_dir.join("backtranslate-stats.json");
    std::fs::write(
        &stats_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "monolingual": stats,
            "oov_rate": stats.oov_rate(),
            "backtranslate": bt_stats,
        }))?,
    )?;
    manifest.output(&stats_path);
    manifest.write(&report_dir)?;
    println!(
        "back-translated {} sentences ({} empty dropped, OOV rate {:.2}%)",
        bt_stats.translated,
        bt_stats.empty_dropped,
        100.0 * stats.oov_rate()
    );
    Ok(())
}

fn load_gloss_hyps(
    path: &PathBuf,
    gloss_vocab: &signbt_core::vocab::Vocabulary,
) -> Result<Vec<GlossHypothesis>> {
    let body = std::fs::read_to_string(path)
        .with_context(|| format!("reading gloss hypotheses {}", path.display()))?;
    let mut hyps = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let origin = v["origin"]
            .as_u64()
            .with_context(|| format!("{}:{}: missing origin", path.display(), i + 1))?
            as usize;
        let glosses: Vec<u32> = v["glosses"]
            .as_array()
            .with_context(|| format!("{}:{}: missing glosses", path.display(), i + 1))?
            .iter()
            .map(|t| {
                let tok = t.as_str().unwrap_or_default();
                gloss_vocab
                    .id(tok)
                    .with_context(|| format!("{}:{}: unknown gloss `{tok}`", path.display(), i + 1))
            })
            .collect::<Result<_>>()?;
        hyps.push(GlossHypothesis { origin, glosses });
    }
    Ok(hyps)
}

pub fn synthesize(config: &ExperimentConfig, strict_fingerprint: bool) -> Result<()> {
    let mut manifest = ManifestBuilder::new("synthesize", config.seed, config.canonical_json());
    let art = Artifacts::new(config);
    let (gloss_vocab, word_vocab) = art.vocabs()?;
    let mono_path = art.path(&config.paths.monolingual);
    pipeline::require_artifact(&mono_path, "generate")?;
    let (texts, _) = corpus::load_monolingual(&mono_path, &word_vocab, config.language.tokenization)?;
    let hyps_path = art.path(&config.paths.gloss_hyps);
    pipeline::require_artifact(&hyps_path, "backtranslate")?;
    let hyps = load_gloss_hyps(&hyps_path, &gloss_vocab)?;
    let bank = art.bank()?;
    manifest.input(&mono_path)?;
    manifest.input(&hyps_path)?;
    manifest.input(&art.path(&config.paths.bank))?;

    check_bank_fingerprint(config, &art, &bank, strict_fingerprint)?;

    let (pairs, stats) = backtranslation::synthesize(&hyps, &texts, &bank, config.seed)?;
    let out = art.path(&config.paths.synthetic);
    ensure_parent(&out)?;
    backtranslation::save_synthetic_pairs(&pairs, &gloss_vocab, &word_vocab, &out)?;
    manifest.output(&out);

    let report_dir = config.paths.report_dir();
    std::fs::create_dir_all(&report_dir)?;
    let stats_path = report_dir.join("synthesize-stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)?)?;
    manifest.output(&stats_path);
    manifest.write(&report_dir)?;
    println!(
        "synthesized {} pairs ({} dropped for uncovered glosses, mean length {:.1})",
        stats.kept, stats.dropped_oov, stats.mean_feature_len
    );
    Ok(())
}

fn check_bank_fingerprint(
    config: &ExperimentConfig,
    art: &Artifacts<'_>,
    bank: &SignBank,
    strict: bool,
) -> Result<()> {
    let embedder_path = art.path(&config.paths.embedder);
    if !embedder_path.exists() {
        return Ok(());
    }
    let fingerprint = signbt_core::container::file_sha256(&embedder_path)?;
    if let Err(e) = bank.check_fingerprint(&fingerprint) {
        if strict {
            bail!("{e}");
        }
        eprintln!("warning: {e}");
    }
    Ok(())
}

/// What supplements the parallel data during SLT training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticMode {
    None,
    SignBt,
    Blank,
}

impl std::str::FromStr for SyntheticMode {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SyntheticMode::None),
            "signbt" => Ok(SyntheticMode::SignBt),
            "blank" => Ok(SyntheticMode::Blank),
            other => bail!("unknown synthetic mode `{other}` (none|signbt|blank)"),
        }
    }
}

pub fn train_slt(config: &ExperimentConfig, mode: SyntheticMode, strict_fingerprint: bool) -> Result<()> {
    let mut manifest = ManifestBuilder::new("train-slt", config.seed, config.canonical_json());
    let art = Artifacts::new(config);
    let (gloss_vocab, word_vocab) = art.vocabs()?;
    let train = art.split(Split::Train, &gloss_vocab, &word_vocab)?;
    let dev = art.split(Split::Dev, &gloss_vocab, &word_vocab)?;
    manifest.input(&art.path(&config.paths.train_corpus))?;
    manifest.input(&art.path(&config.paths.dev_corpus))?;

    let task = config.task;
    let (source_mode, embedded_train, embedded_dev) = match task {
        Task::S2T => {
            let (embedder, _) = art.embedder()?;
            manifest.input(&art.path(&config.paths.embedder))?;
            let emb_train = pipeline::embed_corpus(&embedder, &train)?;
            let emb_dev = pipeline::embed_corpus(&embedder, &dev)?;
            (
                SourceMode::Feature { input_dim: embedder.config.hidden_dim },
                Some(emb_train),
                Some(emb_dev),
            )
        }
        Task::G2T => (SourceMode::Token { vocab_size: gloss_vocab.len() }, None, None),
        Task::T2G => bail!("use `signbt train-t2g` for the back-translator"),
        Task::S2G2T => bail!("S2G2T evaluates an S2G recognizer plus a G2T model; set task = \"g2t\" to train it"),
    };
    let parallel = pipeline::task_pairs(task, &train, embedded_train.as_deref())?;
    let dev_set = pipeline::eval_set(task, &dev, embedded_dev.as_deref(), config.decode.max_len)?;

    let (synthetic, bank): (Vec<SyntheticPair>, Option<SignBank>) = match mode {
        SyntheticMode::None => (Vec::new(), None),
        SyntheticMode::SignBt => {
            let synth_path = art.path(&config.paths.synthetic);
            pipeline::require_artifact(&synth_path, "synthesize")?;
            let pairs = backtranslation::load_synthetic_pairs(&synth_path, &gloss_vocab, &word_vocab)?;
            let bank = art.bank()?;
            check_bank_fingerprint(config, &art, &bank, strict_fingerprint)?;
            manifest.input(&synth_path)?;
            manifest.input(&art.path(&config.paths.bank))?;
            (pairs, Some(bank))
        }
        SyntheticMode::Blank => {
            let mono_path = art.path(&config.paths.monolingual);
            pipeline::require_artifact(&mono_path, "generate")?;
            let (texts, _) =
                corpus::load_monolingual(&mono_path, &word_vocab, config.language.tokenization)?;
            manifest.input(&mono_path)?;
            let dim = match source_mode {
                SourceMode::Feature { input_dim } => input_dim,
                SourceMode::Token { .. } => {
                    bail!("blank-input control needs a feature-mode model (task S2T)")
                }
            };
            (blank_input_control(&texts, config.blank.feature_len, dim), None)
        }
    };

    let model = Seq2SeqModel::new(config.model.to_core(), source_mode, word_vocab.len(), config.seed)?;
    let mut trainer = Trainer::new(model, config.train.to_params(config.seed));

    let schedule = match mode {
        SyntheticMode::None => MixSchedule {
            warmup_epochs: 0,
            post_warmup_ratio: 0.0,
            resample_each_epoch: true,
            resplice_each_epoch: true,
        },
        _ => config.schedule.to_core(),
    };
    let log = backtranslation::mixed_train(
        &mut trainer,
        &parallel,
        &synthetic,
        bank.as_ref(),
        &schedule,
        config.train.epochs,
        config.seed,
        Some(&dev_set),
    )?;

    let out = art.path(&config.paths.slt_model);
    ensure_parent(&out)?;
    trainer.save_checkpoint(&out)?;
    manifest.output(&out);

    let report_dir = config.paths.report_dir();
    std::fs::create_dir_all(&report_dir)?;
    let log_path = report_dir.join("train-slt-log.json");
    std::fs::write(&log_path, serde_json::to_string_pretty(&log)?)?;
    manifest.output(&log_path);
    manifest.write(&report_dir)?;
    let last = log.last();
    println!(
        "slt trained ({} epochs): final loss {:.4}, dev BLEU-4 {}",
        log.len(),
        last.map_or(f64::NAN, |l| l.train_loss),
        last.and_then(|l| l.dev_bleu4).map_or("n/a".to_string(), |b| format!("{b:.2}"))
    );
    Ok(())
}

pub fn evaluate(config: &ExperimentConfig, split: Split) -> Result<()> {
    let mut manifest = ManifestBuilder::new("evaluate", config.seed, config.canonical_json());
    let art = Artifacts::new(config);
    let (gloss_vocab, word_vocab) = art.vocabs()?;
    let samples = art.split(split, &gloss_vocab, &word_vocab)?;

    let task = config.task;
    let needs_embedder = matches!(task, Task::S2T | Task::S2G2T);
    let embedder = if needs_embedder {
        manifest.input(&art.path(&config.paths.embedder))?;
        Some(art.embedder()?.0)
    } else {
        None
    };
    let model = match task {
        Task::T2G => {
            manifest.input(&art.path(&config.paths.t2g_model))?;
            art.t2g_model()?
        }
        _ => {
            manifest.input(&art.path(&config.paths.slt_model))?;
            art.slt_model()?
        }
    };

    let decoded = pipeline::decode_corpus(
        task,
        &samples,
        embedder.as_ref(),
        &model,
        &gloss_vocab,
        &config.decode.to_core(),
    )?;
    let target_vocab = match task {
        Task::T2G => &gloss_vocab,
        _ => &word_vocab,
    };
    let report_dir = config.paths.report_dir();
    let (report, outputs) = pipeline::write_eval_report(
        task,
        split,
        &decoded,
        target_vocab,
        &config.decode,
        &report_dir,
    )?;
    for o in &outputs {
        manifest.output(o);
    }
    manifest.write(&report_dir)?;
    println!(
        "{:?} on {}: ROUGE-L {:.2}, BLEU-4 {:.2}{}",
        task,
        split,
        report.rouge_l,
        report.bleu4,
        report
            .wer
            .map(|w| format!(", WER {:.2}%", 100.0 * w.wer))
            .unwrap_or_default()
    );
    Ok(())
}

pub fn sweep(config: &ExperimentConfig, split: Split) -> Result<()> {
    let mut manifest = ManifestBuilder::new("sweep", config.seed, config.canonical_json());
    let art = Artifacts::new(config);
    let (gloss_vocab, word_vocab) = art.vocabs()?;
    let samples = art.split(split, &gloss_vocab, &word_vocab)?;
    let task = config.task;
    let embedder = if matches!(task, Task::S2T | Task::S2G2T) {
        manifest.input(&art.path(&config.paths.embedder))?;
        Some(art.embedder()?.0)
    } else {
        None
    };
    let model = match task {
        Task::T2G => art.t2g_model()?,
        _ => art.slt_model()?,
    };

    let mut csv = String::from("beam_width,alpha,bleu4,rouge_l\n");
    for &beam in &config.sweep.beam_widths {
        for &alpha in &config.sweep.alphas {
            let params = signbt_core::seq2seq::DecodeParams {
                beam_width: beam,
                length_penalty_alpha: alpha,
                max_len: config.decode.max_len,
            };
            let decoded =
                pipeline::decode_corpus(task, &samples, embedder.as_ref(), &model, &gloss_vocab, &params)?;
            let bleu = signbt_core::metrics::bleu(&decoded.hypotheses, &decoded.references)?;
            let rouge = signbt_core::metrics::rouge_l(&decoded.hypotheses, &decoded.references)?;
            csv.push_str(&format!("{beam},{alpha},{:.4},{:.4}\n", bleu.bleu[3], rouge));
        }
    }
    let report_dir = config.paths.report_dir();
    std::fs::create_dir_all(&report_dir)?;
    let out = report_dir.join(format!("sweep-{split}.csv"));
    std::fs::write(&out, csv)?;
    manifest.output(&out);
    manifest.write(&report_dir)?;
    println!(
        "sweep complete: {} rows -> {}",
        config.sweep.beam_widths.len() * config.sweep.alphas.len(),
        out.display()
    );
    Ok(())
}
