//! Staged distillation and fine-tuning.
//!
//! The full recipe runs five stages in order:
//!
//! 1. hidden-state and attention transfer on unlabeled inputs (encoder and
//!    alignment map train),
//! 2. logit regression on teacher soft labels with the encoder frozen,
//! 3. logit regression with everything trainable,
//! 4. cross-entropy on hard labels with the encoder frozen,
//! 5. cross-entropy with everything trainable.
//!
//! Each stage gets a fresh Adam optimizer. Per-example gradients are computed
//! independently (optionally in parallel) and merged in a fixed order, so a
//! run is bit-reproducible for a given seed regardless of execution mode.

mod data;
mod distil;
mod plan;
mod run;

pub use data::{epoch_order, Example, LabeledSet, SoftLabeled, Target};
pub use distil::{distil, init_student, DistilOutcome, StudentInit, TrainReport};
pub use plan::{
    make_plan, Ablations, DataKind, DistilConfig, LossKind, ParamGroup, Schedule, SoftLabelSource, Stage1Data,
    StagePlan,
};
pub use run::{
    evaluate, fine_tune, predict_labels, run_stage, soft_label, EvalMetrics, FineTuneOptions, FineTuneReport,
    GroupHashes, RunContext, StageData, StageReport,
};
