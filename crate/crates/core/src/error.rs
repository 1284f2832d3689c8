//! Error types shared across the toolkit.

use std::path::Path;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: missing field `{field}`")]
    MissingField { path: String, line: usize, field: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}:{line}: unknown token `{token}`")]
    UnknownToken { path: String, line: usize, token: String },
    #[error("invalid language spec: field `{field}` {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("duplicate token `{0}` in vocabulary")]
    DuplicateToken(String),
    #[error("{0}: vocabulary file does not start with the reserved tokens")]
    BadVocabHeader(String),
}

impl CorpusError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("target needs at least {needed} steps but the lattice has {available}")]
    InfeasibleTarget { needed: usize, available: usize },
    #[error("target class {0} is out of range for {1} classes")]
    ClassOutOfRange(u32, usize),
    #[error("lattice row {row} probabilities sum to {sum}, expected 1")]
    UnnormalizedRow { row: usize, sum: f64 },
    #[error("lattice is empty")]
    EmptyLattice,
    #[error("brute-force enumeration refused: N={n} C={c} exceeds guard N<=10 C<=4")]
    SizeGuard { n: usize, c: usize },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input dimension {got} does not match model dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("input has {got} frames, at least {min} required")]
    TooShort { got: usize, min: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    NoTrainingData,
    #[error("decode prefix must begin with <bos>")]
    BadPrefix,
    #[error("target sequence must end with <eos>")]
    TargetMissingEos,
    #[error("checkpoint does not contain optimizer state")]
    NoOptimizerState,
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("gloss {gloss} has no pieces in the bank")]
    OovGloss { gloss: u32 },
    #[error("bank fingerprint {found} does not match embedder fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: not a toolkit container (bad magic)")]
    BadMagic(String),
    #[error("{path}: container kind `{found}`, expected `{expected}`")]
    WrongKind { path: String, expected: String, found: String },
    #[error("{path}: container version {found}, this build supports {supported}")]
    Version { path: String, found: u32, supported: u32 },
    #[error("{0}: container truncated or corrupt")]
    Truncated(String),
    #[error("{path}: malformed header: {message}")]
    BadHeader { path: String, message: String },
    #[error("{path}: tensor `{name}` missing from container")]
    MissingTensor { path: String, name: String },
}

impl ContainerError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ContainerError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("hypothesis and reference corpora differ in length: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
}
