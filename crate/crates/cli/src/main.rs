//! `signbt`: reproducible pipelines from corpus generation through
//! back-translation to evaluation. Exit code 0 on success; on failure a
//! structured JSON object goes to stderr and the exit code is nonzero.

mod commands;
mod config;
mod manifest;
mod pipeline;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use pipeline::Split;

#[derive(Parser)]
#[command(
    name = "signbt",
    about = "Sign back-translation toolkit: alignment, gloss-to-sign bank, synthetic pair training",
    version
)]
struct Cli {
    /// Experiment configuration file (TOML). Flags override config fields;
    /// precedence is flags > file > built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override. All randomness flows from this through named
    /// substreams (corpus, t2g, synthesis, slt).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads. Results are identical for any thread count; this
    /// only trades wall time.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Work directory override.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic toy corpus, vocabularies and monolingual text.
    Generate,
    /// Pretrain the sign embedder with CTC on the training corpus.
    TrainEmbedder,
    /// Write the most probable blank-free alignment of every training sample.
    Align,
    /// Segment embeddings along alignments into the gloss-to-sign bank.
    BuildBank,
    /// Train the text-to-gloss back-translator and report held-out BLEU-4.
    TrainT2g,
    /// Translate monolingual text into gloss hypotheses.
    Backtranslate,
    /// Splice bank pieces into synthetic feature/text pairs.
    Synthesize {
        /// Fail instead of warning when the bank fingerprint does not match
        /// the current embedder checkpoint.
        #[arg(long)]
        strict_fingerprint: bool,
    },
    /// Train the translation model, optionally mixing in synthetic pairs.
    TrainSlt {
        /// What supplements the parallel pairs: none, signbt or blank.
        #[arg(long, default_value = "none")]
        synthetic: commands::SyntheticMode,
        #[arg(long)]
        strict_fingerprint: bool,
    },
    /// Decode a split and write metric reports.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Grid over beam width and length penalty, CSV of BLEU-4 and ROUGE-L.
    Sweep {
        #[arg(long, default_value = "dev")]
        split: Split,
    },
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.work_dir {
        config.paths.work_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    let config = resolve_config(&cli)?;
    match cli.command {
        Command::Generate => commands::generate(&config),
        Command::TrainEmbedder => commands::train_embedder(&config),
        Command::Align => commands::align(&config),
        Command::BuildBank => commands::cmd_build_bank(&config),
        Command::TrainT2g => commands::train_t2g(&config),
        Command::Backtranslate => commands::backtranslate(&config),
        Command::Synthesize { strict_fingerprint } => {
            commands::synthesize(&config, strict_fingerprint)
        }
        Command::TrainSlt { synthetic, strict_fingerprint } => {
            commands::train_slt(&config, synthetic, strict_fingerprint)
        }
        Command::Evaluate { split } => commands::evaluate(&config, split),
        Command::Sweep { split } => commands::sweep(&config, split),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let chain: Vec<String> = err.chain().map(|c| c.to_string()).collect();
        let payload = serde_json::json!({
            "error": err.to_string(),
            "chain": chain,
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
