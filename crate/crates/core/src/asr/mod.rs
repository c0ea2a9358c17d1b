//! Miniature encoder-decoder speech recognizer: tokenizer, model, greedy
//! decoding and supervised training on clean audio.

mod model;
mod tokenizer;
mod train;

pub use model::{argmax, AsrConfig, AsrModel, EncoderEmbedding, LogitSequence};
pub use tokenizer::{Tokenizer, EOT, PAD, SOT, SPACE, UNK, VOCAB_SIZE};
pub use train::{train_base, BaseExample, BaseTrainConfig, BaseTrainReport};
