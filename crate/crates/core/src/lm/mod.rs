//! Character-level decoder-only language model with activation tracing.

mod generate;
mod model;
mod tokenizer;
mod train;

pub use generate::Decoding;
pub use model::{layer_of, layer_prefix, lm_loss, token_nll, ActivationTrace, ModelConfig, TinyLm};
pub use tokenizer::{TokenSequence, Tokenizer, BOS, EOS, PAD, SEP, UNK};
pub use train::{TrainConfig, TrainReport, Trainable};
