//! Sign back-translation toolkit.
//!
//! Pipelines for turning monolingual text into synthetic sign-feature
//! training pairs: CTC-based forced alignment, a gloss-indexed feature bank,
//! splicing, transformer sequence-to-sequence training and evaluation.

pub mod autodiff;
pub mod backtranslation;
pub mod bank;
pub mod container;
pub mod corpus;
pub mod ctc;
pub mod embedder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod seq2seq;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
