use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::transformer::Sequence;

/// Supervision for one example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    /// Sequence class.
    Class(usize),
    /// One optional class per token; `None` positions are not scored.
    Tokens(Vec<Option<usize>>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub seq: Sequence,
    pub target: Target,
}

/// Hard-labeled examples for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSet {
    pub examples: Vec<Example>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(examples: Vec<Example>, num_classes: usize) -> Result<Self> {
        for (i, e) in examples.iter().enumerate() {
            let bad = match &e.target {
                Target::Class(c) => (*c >= num_classes).then_some(*c),
                Target::Tokens(t) => {
                    if t.len() != e.seq.len() {
                        return Err(Error::Data(format!(
                            "example {i}: {} token labels for {} tokens",
                            t.len(),
                            e.seq.len()
                        )));
                    }
                    t.iter().flatten().copied().find(|&c| c >= num_classes)
                }
            };
            if let Some(c) = bad {
                return Err(Error::Data(format!(
                    "example {i}: label {c} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(LabeledSet { examples, num_classes })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sequences(&self) -> Vec<Sequence> {
        self.examples.iter().map(|e| e.seq.clone()).collect()
    }

    /// Deterministic split: the last `fraction` of examples (at least one
    /// when there are two or more) form the validation part.
    pub fn split_validation(&self, fraction: f64) -> (LabeledSet, LabeledSet) {
        let n = self.examples.len();
        let mut v = (n as f64 * fraction).round() as usize;
        if n >= 2 && fraction > 0.0 {
            v = v.clamp(1, n - 1);
        }
        let cut = n - v.min(n);
        (
            LabeledSet {
                examples: self.examples[..cut].to_vec(),
                num_classes: self.num_classes,
            },
            LabeledSet {
                examples: self.examples[cut..].to_vec(),
                num_classes: self.num_classes,
            },
        )
    }
}

/// Sequences paired with teacher logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabeled<T> {
    pub seqs: Vec<Sequence>,
    pub logits: Vec<Tensor<T>>,
}

impl<T: Real> SoftLabeled<T> {
    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn extend(&mut self, other: SoftLabeled<T>) {
        self.seqs.extend(other.seqs);
        self.logits.extend(other.logits);
    }
}

/// Example order for one epoch, shuffled by a seed derived from the run
/// seed, stage and epoch.
pub fn epoch_order(n: usize, seed: u64, stage: u8, epoch: usize) -> Vec<usize> {
    let mix = seed
        ^ (stage as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (epoch as u64 + 1).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}
