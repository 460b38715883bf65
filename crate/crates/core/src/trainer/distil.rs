use std::time::Instant;

use serde::Serialize;

use super::data::{LabeledSet, SoftLabeled};
use super::plan::{make_plan, DataKind, DistilConfig, LossKind, SoftLabelSource, Stage1Data};
use super::run::{evaluate, run_stage, soft_label, EvalMetrics, RunContext, StageData, StageReport};
use crate::error::{Error, Result};
use crate::factorize::adapt_embeddings;
use crate::losses::AlignmentMap;
use crate::metrics::{MetricsSink, StepRecord};
use crate::real::Real;
use crate::transformer::{names, ModelConfig, Sequence, TransformerModel};

/// How the student starts.
#[derive(Debug, Clone, Copy)]
pub enum StudentInit<'m, T> {
    /// Fresh weights for this architecture. Unless disabled, the word
    /// embeddings are the SVD projection of the teacher's.
    Random(&'m ModelConfig),
    /// Every tensor copied from an existing model.
    FromCheckpoint(&'m TransformerModel<T>),
    /// Encoder copied from an existing (e.g. task-agnostic) student, with a
    /// fresh task head sized for the teacher's classes.
    FromStudentSeed(&'m TransformerModel<T>),
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
    pub records: Vec<StepRecord>,
    pub validation: Option<EvalMetrics>,
    pub teacher_hash: String,
    pub wall_ms: u64,
}

pub struct DistilOutcome<T> {
    pub student: TransformerModel<T>,
    pub alignment: Option<AlignmentMap<T>>,
    pub report: TrainReport,
}

/// Build the initial student.
pub fn init_student<T: Real>(
    cfg: &DistilConfig,
    teacher: &TransformerModel<T>,
    init: StudentInit<'_, T>,
) -> Result<TransformerModel<T>> {
    let tc = teacher.config();
    let student = match init {
        StudentInit::Random(sc) => {
            if sc.vocab_size != tc.vocab_size {
                return Err(Error::Config(format!(
                    "student vocab_size {} differs from the teacher's {}",
                    sc.vocab_size, tc.vocab_size
                )));
            }
            let mut sc = sc.clone();
            sc.num_classes = tc.num_classes;
            sc.head = tc.head;
            let mut m = TransformerModel::random(sc, cfg.seed)?;
            let factorize = !cfg.ablations.no_embedding_factorization && !cfg.ablations.init_from_scratch;
            if factorize {
                let table = &teacher.params().get(names::WORD).expect("teacher has word embeddings").tensor;
                m.replace_word_embeddings(adapt_embeddings(table, m.config().hidden_dim)?)?;
            }
            m
        }
        StudentInit::FromCheckpoint(m) => m.clone(),
        StudentInit::FromStudentSeed(m) => {
            let mut m = m.clone();
            m.reset_classifier(tc.num_classes, tc.head, cfg.seed)?;
            m
        }
    };
    if student.config().num_classes != tc.num_classes {
        return Err(Error::Config(format!(
            "student predicts {} classes, teacher {}",
            student.config().num_classes,
            tc.num_classes
        )));
    }
    Ok(student)
}

/// Run the staged recipe end to end.
///
/// The last 10% of `labeled` is held out for the final validation metric;
/// soft labels are teacher logits on the remaining examples (plus the
/// transfer set when configured).
pub fn distil<T: Real>(
    cfg: &DistilConfig,
    teacher: &TransformerModel<T>,
    init: StudentInit<'_, T>,
    transfer: &[Sequence],
    labeled: &LabeledSet,
    sink: &mut dyn MetricsSink,
) -> Result<DistilOutcome<T>> {
    let started = Instant::now();
    let plan = make_plan(cfg)?;
    let mut student = init_student(cfg, teacher, init)?;
    if labeled.num_classes != teacher.config().num_classes {
        return Err(Error::contract(format!(
            "labeled data has {} classes, teacher {}",
            labeled.num_classes,
            teacher.config().num_classes
        )));
    }
    let (train, val) = labeled.split_validation(0.1);
    let teacher_hash = teacher.params().hash();
    let exec = cfg.execution;

    let needs_align = plan.iter().any(|p| p.uses(LossKind::Layer));
    let mut alignment = if needs_align {
        let (s, t) = (student.config(), teacher.config());
        Some(AlignmentMap::new(
            s.hidden_dim,
            t.hidden_dim,
            s.num_layers,
            t.num_layers,
            cfg.per_layer_alignment,
            cfg.seed.wrapping_add(1),
        )?)
    } else {
        None
    };

    let stage1: Vec<Sequence> = if plan.iter().any(|p| p.data == DataKind::UnlabeledTransfer) {
        match cfg.stage1_data {
            Stage1Data::Transfer => transfer.to_vec(),
            Stage1Data::Labeled => train.sequences(),
            Stage1Data::Both => transfer.iter().cloned().chain(train.sequences()).collect(),
        }
    } else {
        Vec::new()
    };
    let soft: SoftLabeled<T> = if plan.iter().any(|p| p.data == DataKind::SoftLabeledTransfer) {
        let mut s = soft_label(teacher, &train.sequences(), exec)?;
        if cfg.soft_labels == SoftLabelSource::LabeledAndTransfer {
            s.extend(soft_label(teacher, transfer, exec)?);
        }
        s
    } else {
        SoftLabeled {
            seqs: Vec::new(),
            logits: Vec::new(),
        }
    };

    let mut ctx = RunContext::new(cfg.seed, exec, sink);
    let mut stages = Vec::with_capacity(plan.len());
    for p in &plan {
        let data = match p.data {
            DataKind::UnlabeledTransfer => StageData::Unlabeled(&stage1),
            DataKind::SoftLabeledTransfer => StageData::Soft(&soft),
            DataKind::HardLabeled => StageData::Hard(&train),
        };
        let align = if p.uses(LossKind::Layer) { alignment.as_mut() } else { None };
        let report = run_stage(p, Some(teacher), &mut student, align, data, &mut ctx)?;
        stages.push(report);
    }
    if teacher.params().hash() != teacher_hash {
        return Err(Error::contract("teacher parameters changed during distillation"));
    }
    let validation = if val.is_empty() {
        None
    } else {
        Some(evaluate(&student, &val, exec)?)
    };
    Ok(DistilOutcome {
        student,
        alignment,
        report: TrainReport {
            stages,
            records: ctx.records,
            validation,
            teacher_hash,
            wall_ms: started.elapsed().as_millis() as u64,
        },
    })
}
