use crate::error::{Error, Result};
use crate::factorize::adapt_embeddings;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::transformer::{names, TransformerModel, Vocab};

/// Copy `student` with its word embeddings replaced by the SVD projection of
/// `teacher_emb` (one row per token of `vocab`).
///
/// Every other tensor is carried over unchanged. The new embeddings are
/// marked frozen so later fine-tuning only adapts the encoder and head.
pub fn swap_embeddings<T: Real>(
    student: &TransformerModel<T>,
    vocab: &Vocab,
    teacher_emb: &Tensor<T>,
) -> Result<TransformerModel<T>> {
    let ds = student.config().hidden_dim;
    if teacher_emb.rank() != 2 {
        return Err(Error::contract(format!(
            "embedding table must be a matrix, got shape {:?}",
            teacher_emb.shape()
        )));
    }
    let (rows, dt) = (teacher_emb.shape()[0], teacher_emb.shape()[1]);
    if rows != vocab.len() {
        return Err(Error::contract(format!(
            "embedding table has {rows} rows for a vocabulary of {} tokens",
            vocab.len()
        )));
    }
    if dt < ds {
        return Err(Error::contract(format!(
            "teacher embedding width {dt} is smaller than student width {ds}"
        )));
    }
    let projected = adapt_embeddings(teacher_emb, ds)?;
    let mut out = student.clone();
    out.replace_word_embeddings(projected)?;
    out.params_mut()
        .get_mut(names::WORD)
        .expect("word embeddings exist")
        .frozen = true;
    Ok(out)
}
