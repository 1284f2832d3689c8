//! Transformer encoder-decoder used for every sequence task in the
//! pipeline: sign-to-text, gloss-to-text and the text-to-gloss
//! back-translator.

mod decode;
mod model;
mod train;

pub use decode::{beam_search, greedy_decode, length_penalty, DecodeParams};
pub use model::{Seq2SeqModel, Source, SourceMode, SourceSeq, TransformerConfig};
pub use train::{smoothing_floor, TrainPair, TrainParams, Trainer};
