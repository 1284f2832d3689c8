//! The gloss-to-sign bank: feature pieces harvested from forced alignments,
//! indexed by gloss id, sampled uniformly at splice time.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::corpus::ParallelSample;
use crate::ctc;
use crate::embedder::SignEmbedder;
use crate::error::{BankError, ContainerError, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// One contiguous slice of an embedding sequence attributed to a gloss.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePiece {
    /// `k x dim` embedding steps, k >= 1.
    pub vectors: Tensor,
    pub source_sample: String,
    /// Half-open step range within the source sample's embedding sequence.
    pub span: (usize, usize),
}

/// Gloss id -> feature pieces, with the fingerprint of the embedder
/// checkpoint the pieces were extracted with.
#[derive(Debug, Clone, PartialEq)]
pub struct SignBank {
    pub dim: usize,
    pub entries: BTreeMap<u32, Vec<FeaturePiece>>,
    pub embedder_fingerprint: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    /// Piece count per gloss id, including zeros for uncovered glosses.
    pub pieces_per_gloss: BTreeMap<u32, usize>,
    /// Vocabulary glosses with no pieces.
    pub missing: Vec<u32>,
    /// Samples skipped because alignment was infeasible or frames absent.
    pub skipped: Vec<String>,
}

impl SignBank {
    /// Uniformly samples one piece per gloss and concatenates them in order.
    /// A gloss without pieces is an error carrying the gloss id; the caller
    /// decides the drop policy.
    pub fn splice(&self, glosses: &[u32], rng: &mut impl Rng) -> Result<Tensor, BankError> {
        let mut chosen: Vec<&FeaturePiece> = Vec::with_capacity(glosses.len());
        for &gloss in glosses {
            let pieces =
                self.entries.get(&gloss).filter(|p| !p.is_empty()).ok_or(BankError::OovGloss { gloss })?;
            chosen.push(&pieces[rng.gen_range(0..pieces.len())]);
        }
        let total: usize = chosen.iter().map(|p| p.vectors.rows).sum();
        let mut out = Tensor::zeros(total, self.dim);
        let mut row = 0;
        for piece in chosen {
            for r in 0..piece.vectors.rows {
                out.row_mut(row).copy_from_slice(piece.vectors.row(r));
                row += 1;
            }
        }
        Ok(out)
    }

    /// True when every gloss in the sequence has at least one piece.
    pub fn covers(&self, glosses: &[u32]) -> bool {
        glosses.iter().all(|g| self.entries.get(g).is_some_and(|p| !p.is_empty()))
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<(), BankError> {
        if self.embedder_fingerprint == expected {
            Ok(())
        } else {
            Err(BankError::FingerprintMismatch {
                expected: expected.to_string(),
                found: self.embedder_fingerprint.clone(),
            })
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        #[derive(Serialize)]
        struct PieceInfo<'a> {
            source: &'a str,
            span: (usize, usize),
        }
        let mut entries = serde_json::Map::new();
        for (gloss, pieces) in &self.entries {
            let infos: Vec<PieceInfo> = pieces
                .iter()
                .map(|p| PieceInfo { source: &p.source_sample, span: p.span })
                .collect();
            entries.insert(gloss.to_string(), serde_json::to_value(infos).unwrap());
        }
        let meta = serde_json::json!({
            "dim": self.dim,
            "fingerprint": self.embedder_fingerprint,
            "entries": entries,
        });
        let mut c = Container::new("bank", meta);
        for (gloss, pieces) in &self.entries {
            for (i, piece) in pieces.iter().enumerate() {
                c.push(format!("{gloss}/{i}"), piece.vectors.clone());
            }
        }
        c.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct PieceInfo {
            source: String,
            span: (usize, usize),
        }
        let mut c = Container::load(path, "bank")?;
        let bad_header = |message: String| ContainerError::BadHeader {
            path: path.display().to_string(),
            message,
        };
        let dim = c.meta["dim"].as_u64().ok_or_else(|| bad_header("missing dim".into()))? as usize;
        let fingerprint = c.meta["fingerprint"]
            .as_str()
            .ok_or_else(|| bad_header("missing fingerprint".into()))?
            .to_string();
        let raw_entries = c.meta["entries"]
            .as_object()
            .ok_or_else(|| bad_header("missing entries".into()))?
            .clone();
        let mut entries = BTreeMap::new();
        for (gloss_str, infos) in raw_entries {
            let gloss: u32 =
                gloss_str.parse().map_err(|_| bad_header(format!("bad gloss key {gloss_str}")))?;
            let infos: Vec<PieceInfo> = serde_json::from_value(infos)
                .map_err(|e| bad_header(format!("gloss {gloss_str}: {e}")))?;
            let mut pieces = Vec::with_capacity(infos.len());
            for (i, info) in infos.into_iter().enumerate() {
                let vectors = c.take_tensor(&format!("{gloss}/{i}"), path)?;
                pieces.push(FeaturePiece { vectors, source_sample: info.source, span: info.span });
            }
            entries.insert(gloss, pieces);
        }
        Ok(Self { dim, entries, embedder_fingerprint: fingerprint })
    }
}

/// Embeds every sample, finds its most probable blank-free alignment, and
/// slices the embedding sequence into gloss pieces. Infeasible samples are
/// skipped and reported.
pub fn build_bank(
    samples: &[ParallelSample],
    embedder: &SignEmbedder,
    gloss_vocab: &Vocabulary,
    embedder_fingerprint: &str,
) -> Result<(SignBank, CoverageReport)> {
    struct Harvest {
        sample_id: String,
        pieces: Vec<(u32, FeaturePiece)>,
        ok: bool,
    }
    let harvests: Vec<Harvest> = samples
        .par_iter()
        .map(|sample| {
            let id = sample.id.clone();
            let Some(frames) = &sample.frames else {
                return Harvest { sample_id: id, pieces: Vec::new(), ok: false };
            };
            let classes: Option<Vec<u32>> =
                sample.glosses.iter().map(|&g| gloss_vocab.class_index(g)).collect();
            let Some(classes) = classes else {
                return Harvest { sample_id: id, pieces: Vec::new(), ok: false };
            };
            let Ok(lattice) = embedder.gloss_lattice(frames) else {
                return Harvest { sample_id: id, pieces: Vec::new(), ok: false };
            };
            let Ok((path, _)) = ctc::constrained_viterbi(&lattice, &classes) else {
                return Harvest { sample_id: id, pieces: Vec::new(), ok: false };
            };
            let embeddings = embedder.embed(frames).expect("lattice succeeded");
            let spans = ctc::path_to_spans(&path, &sample.id);
            let pieces = spans
                .into_iter()
                .map(|span| {
                    let rows = span.end - span.start;
                    let mut vectors = Tensor::zeros(rows, embeddings.cols);
                    for r in 0..rows {
                        vectors.row_mut(r).copy_from_slice(embeddings.row(span.start + r));
                    }
                    (
                        gloss_vocab.id_of_class(span.label),
                        FeaturePiece {
                            vectors,
                            source_sample: span.source,
                            span: (span.start, span.end),
                        },
                    )
                })
                .collect();
            Harvest { sample_id: id, pieces, ok: true }
        })
        .collect();

    let mut entries: BTreeMap<u32, Vec<FeaturePiece>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for h in harvests {
        if !h.ok {
            skipped.push(h.sample_id);
            continue;
        }
        for (gloss, piece) in h.pieces {
            entries.entry(gloss).or_default().push(piece);
        }
    }

    let mut pieces_per_gloss = BTreeMap::new();
    let mut missing = Vec::new();
    for gloss in gloss_vocab.regular_ids() {
        let count = entries.get(&gloss).map_or(0, Vec::len);
        pieces_per_gloss.insert(gloss, count);
        if count == 0 {
            missing.push(gloss);
        }
    }

    let bank = SignBank {
        dim: embedder.config.hidden_dim,
        entries,
        embedder_fingerprint: embedder_fingerprint.to_string(),
    };
    Ok((bank, CoverageReport { pieces_per_gloss, missing, skipped }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticLanguageSpec};
    use crate::embedder::EmbedderConfig;
    use crate::rng;

    fn spec_4frames() -> SyntheticLanguageSpec {
        SyntheticLanguageSpec {
            gloss_vocab_size: 4,
            word_vocab_size: 6,
            feature_dim: 6,
            gloss_duration_range: (4, 4),
            noise_std: 0.0,
            reorder_window: 0,
            function_word_rate: 0.0,
            sentence_length_range: (2, 3),
            seed: 17,
        }
    }

    /// An embedder whose output at each step depends on the current frame
    /// only: projection and conv stages are identity center taps, norms are
    /// frozen at mean 0 / var 1.
    fn frame_local_embedder(dim: usize, classes: usize) -> SignEmbedder {
        let config = EmbedderConfig {
            input_dim: dim,
            hidden_dim: dim,
            kernel: 5,
            encoder_ff: 8,
            encoder_heads: 2,
            num_classes: classes,
        };
        let mut model = SignEmbedder::new(config, 0).unwrap();
        let set = |model: &mut SignEmbedder, name: &str, t: Tensor| {
            let id = model.store.id_by_name(name).unwrap();
            *model.store.get_mut(id) = t;
        };
        let mut eye = Tensor::zeros(dim, dim);
        for i in 0..dim {
            eye.set(i, i, 1.0);
        }
        set(&mut model, "proj.w", eye.clone());
        set(&mut model, "proj.b", Tensor::zeros(1, dim));
        for stage in ["conv1", "conv2"] {
            let mut w = Tensor::zeros(5 * dim, dim);
            let center = 2; // kernel 5, middle tap
            for i in 0..dim {
                w.set(center * dim + i, i, 1.0);
            }
            set(&mut model, &format!("{stage}.w"), w);
            set(&mut model, &format!("{stage}.b"), Tensor::zeros(1, dim));
        }
        model
    }

    #[test]
    fn bank_from_one_sample_partitions_steps() {
        let corpus = generate_synthetic_corpus(&spec_4frames(), 1).unwrap();
        let embedder = frame_local_embedder(6, 4);
        let (bank, report) =
            build_bank(&corpus.samples, &embedder, &corpus.gloss_vocab, "fp").unwrap();
        assert!(report.skipped.is_empty());
        let total_steps: usize = bank
            .entries
            .values()
            .flat_map(|ps| ps.iter().map(|p| p.vectors.rows))
            .sum();
        let frames = corpus.samples[0].frames.as_ref().unwrap();
        assert_eq!(total_steps, frames.rows.div_ceil(4));
        for &g in &corpus.samples[0].glosses {
            assert!(bank.entries.contains_key(&g));
        }
    }

    #[test]
    fn noiseless_corpus_gives_identical_pieces_per_gloss() {
        // Frame-local embedder + exact 4-frame glosses: every piece of a
        // gloss is the same single embedding step, bit for bit.
        let corpus = generate_synthetic_corpus(&spec_4frames(), 40).unwrap();
        let embedder = frame_local_embedder(6, 4);
        let (bank, report) =
            build_bank(&corpus.samples, &embedder, &corpus.gloss_vocab, "fp").unwrap();
        assert!(report.skipped.is_empty());
        let mut compared = 0;
        for pieces in bank.entries.values() {
            for pair in pieces.windows(2) {
                assert_eq!(pair[0].vectors, pair[1].vectors);
                compared += 1;
            }
        }
        assert!(compared > 10, "expected many comparable piece pairs, got {compared}");
    }

    #[test]
    fn empty_corpus_reports_full_missing_list() {
        let corpus = generate_synthetic_corpus(&spec_4frames(), 1).unwrap();
        let embedder = frame_local_embedder(6, 4);
        let (bank, report) = build_bank(&[], &embedder, &corpus.gloss_vocab, "fp").unwrap();
        assert!(bank.entries.is_empty());
        assert_eq!(report.missing.len(), 4);
    }

    #[test]
    fn splice_concatenates_in_order() {
        let mut entries = BTreeMap::new();
        entries.insert(
            5u32,
            vec![FeaturePiece {
                vectors: Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
                source_sample: "s".into(),
                span: (0, 3),
            }],
        );
        let bank = SignBank { dim: 2, entries, embedder_fingerprint: "fp".into() };
        let mut rng = rng::stream(1, "splice");
        // [a, a] with a single 3-step piece: length 6, two identical blocks.
        let out = bank.splice(&[5, 5], &mut rng).unwrap();
        assert_eq!(out.rows, 6);
        assert_eq!(out.data[..6], out.data[6..]);
    }

    #[test]
    fn splice_missing_gloss_reports_id() {
        let bank = SignBank { dim: 2, entries: BTreeMap::new(), embedder_fingerprint: "fp".into() };
        let mut rng = rng::stream(1, "splice");
        match bank.splice(&[9], &mut rng) {
            Err(BankError::OovGloss { gloss }) => assert_eq!(gloss, 9),
            other => panic!("expected OovGloss, got {other:?}"),
        }
    }

    #[test]
    fn splice_replay_from_same_stream_state_is_identical() {
        let corpus = generate_synthetic_corpus(&spec_4frames(), 10).unwrap();
        let embedder = frame_local_embedder(6, 4);
        let (bank, _) = build_bank(&corpus.samples, &embedder, &corpus.gloss_vocab, "fp").unwrap();
        let glosses: Vec<u32> = bank.entries.keys().copied().collect();
        let mut rng1 = rng::indexed_stream(42, "splice", 3);
        let a = bank.splice(&glosses, &mut rng1).unwrap();
        let b = bank.splice(&glosses, &mut rng1).unwrap();
        let mut rng2 = rng::indexed_stream(42, "splice", 3);
        assert_eq!(a, bank.splice(&glosses, &mut rng2).unwrap());
        assert_eq!(b, bank.splice(&glosses, &mut rng2).unwrap());
    }

    #[test]
    fn piece_sampling_is_uniform() {
        let piece = |fill: f64| FeaturePiece {
            vectors: Tensor::filled(1, 1, fill),
            source_sample: "s".into(),
            span: (0, 1),
        };
        let mut entries = BTreeMap::new();
        entries.insert(5u32, vec![piece(0.0), piece(1.0)]);
        let bank = SignBank { dim: 1, entries, embedder_fingerprint: "fp".into() };
        let mut rng = rng::stream(7, "uniformity");
        let mut ones = 0usize;
        for _ in 0..10_000 {
            if bank.splice(&[5], &mut rng).unwrap().data[0] == 1.0 {
                ones += 1;
            }
        }
        let freq = ones as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&freq), "piece frequency {freq}");
    }

    #[test]
    fn bank_file_roundtrip() {
        let corpus = generate_synthetic_corpus(&spec_4frames(), 12).unwrap();
        let embedder = frame_local_embedder(6, 4);
        let (bank, _) = build_bank(&corpus.samples, &embedder, &corpus.gloss_vocab, "fp-1").unwrap();
        let dir = std::env::temp_dir().join(format!("bank-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bank.bin");
        bank.save(&path).unwrap();
        let loaded = SignBank::load(&path).unwrap();
        assert_eq!(bank, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_bank_file_errors() {
        let corpus = generate_synthetic_corpus(&spec_4frames(), 3).unwrap();
        let embedder = frame_local_embedder(6, 4);
        let (bank, _) = build_bank(&corpus.samples, &embedder, &corpus.gloss_vocab, "fp").unwrap();
        let dir = std::env::temp_dir().join(format!("bank-trunc-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bank.bin");
        bank.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 16);
        std::fs::write(&path, bytes).unwrap();
        assert!(SignBank::load(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn fingerprint_mismatch_is_detected() {
        let bank = SignBank { dim: 2, entries: BTreeMap::new(), embedder_fingerprint: "abc".into() };
        assert!(bank.check_fingerprint("abc").is_ok());
        let err = bank.check_fingerprint("def").unwrap_err();
        assert!(err.to_string().contains("abc"), "{err}");
    }
}
