//! Tools around the distillation core for moving between tasks and
//! vocabularies.
//!
//! * Source-task selection: given a matrix of transfer scores, pick the
//!   source whose mean over targets is highest. [`build_eval_matrix`] fills
//!   such a matrix by fine-tuning.
//! * Transfer-set augmentation: embed a sentence bank, retrieve the `K`
//!   nearest neighbours of both sides of each source pair and emit every
//!   neighbour combination as a new unlabeled pair.
//! * Embedding swap: give a trained student a new vocabulary by projecting
//!   another model's embedding table to the student's width, keeping every
//!   encoder tensor and freezing the new table.
//! * BIO span scoring for token classification.

mod files;
mod knn;
mod matrix;
pub mod ner;
mod select;
mod swap;

pub use files::{read_corpus, read_ner_file, read_pairs, read_precomputed, write_pairs};
pub use knn::{
    build_transfer_pairs, knn, Corpus, Embedder, HashedEmbedder, Neighbor, PrecomputedEmbedder, SentencePairBank,
    DEFAULT_K, HASHED_DIM,
};
pub use matrix::build_eval_matrix;
pub use select::{select_best_source, EvalMatrix, Selection};
pub use swap::swap_embeddings;
