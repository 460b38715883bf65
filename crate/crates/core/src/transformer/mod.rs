//! Post-LN transformer encoder with a classification head.
//!
//! `H_0` is the sum of word, position and segment embeddings; each block
//! applies multi-head self-attention and a GELU feed-forward network, each
//! followed by a residual connection and layer normalization. Every layer's
//! hidden states and attention probabilities are exposed so they can be
//! used as distillation targets.

mod config;
mod model;
mod vocab;

pub use config::{names, AttentionScaling, HeadKind, ModelConfig};
pub use model::{truncated_normal, Batch, EncodeOutput, Encoded, TransformerModel, LAYER_NORM_EPS};
pub use vocab::{split_words, tokenize, Encoding, Sequence, Vocab, CLS, CONTINUATION, PAD, SEP, UNK};
