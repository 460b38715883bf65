//! Progressive multi-layer knowledge distillation for transformer encoders.
//!
//! A teacher encoder's hidden states, attention maps and task logits are
//! transferred to a narrower, shallower student through a five-stage
//! schedule with parameter freezing. Around that core the crate provides:
//!
//! * [`tensor`]: dense tensors with a reverse-mode gradient tape, Adam and a
//!   finite-difference gradient checker.
//! * [`transformer`]: WordPiece tokenization and a post-LN encoder that
//!   exposes every layer's hidden states and attention maps.
//! * [`factorize`]: truncated SVD projection of embedding tables.
//! * [`losses`]: hidden-state, attention, logit and cross-entropy objectives.
//! * [`trainer`]: the staged distillation schedule and fine-tuning.
//! * [`transfer`]: source-task selection, nearest-neighbour augmentation and
//!   embedding swap for vocabulary transfer.
//! * [`checkpoint`] and [`metrics`]: binary named-tensor checkpoints and
//!   JSON-lines training logs.

pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod factorize;
pub mod losses;
pub mod metrics;
pub mod real;
pub mod suites;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod transfer;
pub mod transformer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use real::Real;
pub use tensor::{Tape, Tensor, Var};
