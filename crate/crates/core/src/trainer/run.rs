use std::time::Instant;

use serde::Serialize;

use super::data::{epoch_order, Example, LabeledSet, SoftLabeled, Target};
use super::plan::{DataKind, LossKind, ParamGroup, StagePlan};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::{self, AlignmentMap};
use crate::metrics::{MetricsSink, StepRecord};
use crate::real::Real;
use crate::tensor::{Adam, AdamConfig, ParamGrads, Tape, Tensor};
use crate::transformer::{names, Sequence, TransformerModel};

/// Inputs for one stage, matching its [`DataKind`].
#[derive(Debug, Clone, Copy)]
pub enum StageData<'d, T> {
    Unlabeled(&'d [Sequence]),
    Soft(&'d SoftLabeled<T>),
    Hard(&'d LabeledSet),
}

impl<T> StageData<'_, T> {
    fn kind(&self) -> DataKind {
        match self {
            StageData::Unlabeled(_) => DataKind::UnlabeledTransfer,
            StageData::Soft(_) => DataKind::SoftLabeledTransfer,
            StageData::Hard(_) => DataKind::HardLabeled,
        }
    }

    fn len(&self) -> usize {
        match self {
            StageData::Unlabeled(s) => s.len(),
            StageData::Soft(s) => s.seqs.len(),
            StageData::Hard(s) => s.examples.len(),
        }
    }
}

/// Mutable bookkeeping shared by consecutive stages of one run.
pub struct RunContext<'s> {
    pub seed: u64,
    pub exec: Execution,
    pub global_step: u64,
    pub started: Instant,
    pub records: Vec<StepRecord>,
    pub sink: &'s mut dyn MetricsSink,
}

impl<'s> RunContext<'s> {
    pub fn new(seed: u64, exec: Execution, sink: &'s mut dyn MetricsSink) -> Self {
        RunContext {
            seed,
            exec,
            global_step: 0,
            started: Instant::now(),
            records: Vec::new(),
            sink,
        }
    }
}

/// Parameter hashes of the student's groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupHashes {
    pub encoder: String,
    pub classifier: String,
    pub alignment: Option<String>,
}

impl GroupHashes {
    pub fn of<T: Real>(model: &TransformerModel<T>, align: Option<&AlignmentMap<T>>) -> Self {
        GroupHashes {
            encoder: model.params().hash_where(names::is_encoder),
            classifier: model.params().hash_where(names::is_classifier),
            alignment: align.map(|a| a.params().hash()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: u64,
    pub epochs: usize,
    /// Mean total loss over the final epoch's steps.
    pub final_loss: Option<f64>,
    pub before: GroupHashes,
    pub after: GroupHashes,
    pub teacher_before: Option<String>,
    pub teacher_after: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub examples: usize,
    /// Sequence accuracy, or token accuracy over labeled tokens.
    pub accuracy: f64,
}

type Components = [Option<f64>; 4];

struct ExampleResult<T> {
    student: ParamGrads<T>,
    align: Option<ParamGrads<T>>,
    losses: Components,
}

fn slot(kind: LossKind) -> usize {
    match kind {
        LossKind::Layer => 0,
        LossKind::Attn => 1,
        LossKind::Logit => 2,
        LossKind::Ce => 3,
    }
}

#[allow(clippy::too_many_arguments)]
fn example_step<T: Real>(
    plan: &StagePlan,
    teacher: Option<&TransformerModel<T>>,
    student: &TransformerModel<T>,
    align: Option<&AlignmentMap<T>>,
    seq: &Sequence,
    soft: Option<&Tensor<T>>,
    target: Option<&Target>,
) -> Result<ExampleResult<T>> {
    let mut tape = Tape::new();
    let svars = student.params().bind(&mut tape, |n| plan.trainable.trains(n));
    let avars = align.map(|a| a.params().bind(&mut tape, |_| plan.trainable.trains_alignment()));
    let enc = student.encode(&mut tape, &svars, &seq.ids, &seq.segments, None)?;

    let needs_teacher = plan.uses(LossKind::Layer) || plan.uses(LossKind::Attn);
    let tenc = if needs_teacher {
        let t = teacher.ok_or_else(|| Error::contract("representation transfer needs a teacher"))?;
        let tvars = t.params().bind(&mut tape, |_| false);
        Some(t.encode(&mut tape, &tvars, &seq.ids, &seq.segments, None)?)
    } else {
        None
    };

    let mut parts = Vec::new();
    let mut losses: Components = [None; 4];
    for &kind in &plan.losses {
        let v = match kind {
            LossKind::Layer => {
                let (map, av) = align
                    .zip(avars.as_deref())
                    .ok_or_else(|| Error::contract("hidden-state transfer needs an alignment map"))?;
                let tenc = tenc.as_ref().unwrap();
                let pairs = map.pairing();
                let pairs = if plan.last_layer_only {
                    vec![*pairs.last().unwrap()]
                } else {
                    pairs
                };
                losses::layer_loss_tape_on(&mut tape, &enc.hidden, &tenc.hidden, map, av, None, &pairs)?
            }
            LossKind::Attn => losses::attn_loss_tape(&mut tape, &enc.attn, &tenc.as_ref().unwrap().attn, None)?,
            LossKind::Logit => {
                let z = soft.ok_or_else(|| Error::contract("logit loss needs teacher logits"))?;
                let zt = tape.constant(z.clone());
                losses::logit_loss_tape(&mut tape, enc.logits, zt)?
            }
            LossKind::Ce => match target {
                Some(Target::Class(c)) => losses::ce_loss_tape(&mut tape, enc.logits, *c)?,
                Some(Target::Tokens(t)) => losses::token_ce_loss_tape(&mut tape, enc.logits, t)?,
                None => return Err(Error::contract("cross-entropy needs hard labels")),
            },
        };
        losses[slot(kind)] = Some(tape.scalar(v).as_f64());
        parts.push(v);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    let mut grads = tape.backward(total)?;
    Ok(ExampleResult {
        student: ParamGrads::from_tape(&mut grads, &svars),
        align: avars.map(|v| ParamGrads::from_tape(&mut grads, &v)),
        losses,
    })
}

/// Run one stage: `epochs` passes over `data` in seeded order, one Adam
/// step per batch. Only parameters selected by `plan.trainable` (and not
/// pinned frozen) change; the teacher is read-only.
pub fn run_stage<T: Real>(
    plan: &StagePlan,
    teacher: Option<&TransformerModel<T>>,
    student: &mut TransformerModel<T>,
    mut align: Option<&mut AlignmentMap<T>>,
    data: StageData<'_, T>,
    ctx: &mut RunContext<'_>,
) -> Result<StageReport> {
    if data.kind() != plan.data {
        return Err(Error::contract(format!(
            "stage {} expects {:?} data, got {:?}",
            plan.id,
            plan.data,
            data.kind()
        )));
    }
    if data.len() == 0 {
        return Err(Error::Data(format!("stage {} has an empty dataset", plan.id)));
    }
    if plan.losses.is_empty() || plan.batch_size == 0 {
        return Err(Error::Config(format!("stage {} needs losses and a positive batch size", plan.id)));
    }
    let teacher_before = teacher.map(|t| t.params().hash());
    let before = GroupHashes::of(student, align.as_deref());

    let adam_cfg = AdamConfig::with_lr(plan.lr);
    let mut opt = Adam::new(adam_cfg, student.params());
    let mut align_opt = align.as_deref().map(|a| Adam::new(adam_cfg, a.params()));
    let n = data.len();
    let mut steps = 0;
    let mut final_loss = None;
    for epoch in 0..plan.epochs {
        let order = epoch_order(n, ctx.seed, plan.id, epoch);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(plan.batch_size) {
            let results = {
                let (st, al) = (&*student, align.as_deref());
                ctx.exec.try_map(chunk, |&i| match data {
                    StageData::Unlabeled(s) => example_step(plan, teacher, st, al, &s[i], None, None),
                    StageData::Soft(s) => example_step(plan, teacher, st, al, &s.seqs[i], Some(&s.logits[i]), None),
                    StageData::Hard(s) => {
                        let Example { seq, target } = &s.examples[i];
                        example_step(plan, teacher, st, al, seq, None, Some(target))
                    }
                })?
            };
            let w = T::lit(1.0 / chunk.len() as f64);
            let mut g = ParamGrads::empty(student.params().len());
            let mut ga = align.as_deref().map(|a| ParamGrads::empty(a.params().len()));
            let mut comps: Components = [None; 4];
            for r in &results {
                g.add_scaled(&r.student, w);
                if let (Some(ga), Some(ra)) = (ga.as_mut(), r.align.as_ref()) {
                    ga.add_scaled(ra, w);
                }
                for (c, v) in comps.iter_mut().zip(r.losses) {
                    if let Some(v) = v {
                        *c = Some(c.unwrap_or(0.0) + v / chunk.len() as f64);
                    }
                }
            }
            opt.step(student.params_mut(), &g)?;
            if let (Some(o), Some(a), Some(ga)) = (align_opt.as_mut(), align.as_deref_mut(), ga.as_ref()) {
                o.step(a.params_mut(), ga)?;
            }
            ctx.global_step += 1;
            steps += 1;
            let rec = StepRecord {
                stage: plan.id,
                step: ctx.global_step,
                loss_layer: comps[0],
                loss_attn: comps[1],
                loss_logit: comps[2],
                loss_ce: comps[3],
                lr: plan.lr,
                wall_ms: ctx.started.elapsed().as_millis() as u64,
            };
            epoch_total += rec.total();
            epoch_steps += 1;
            ctx.sink.record(&rec)?;
            ctx.records.push(rec);
        }
        final_loss = Some(epoch_total / epoch_steps as f64);
    }
    if let Some(t) = final_loss {
        if !t.is_finite() {
            return Err(Error::Numeric(format!("stage {} diverged: mean loss {t}", plan.id)));
        }
    }
    Ok(StageReport {
        stage: plan.id,
        steps,
        epochs: plan.epochs,
        final_loss,
        before,
        after: GroupHashes::of(student, align.as_deref()),
        teacher_before,
        teacher_after: teacher.map(|t| t.params().hash()),
    })
}

/// Teacher logits for every sequence.
pub fn soft_label<T: Real>(teacher: &TransformerModel<T>, seqs: &[Sequence], exec: Execution) -> Result<SoftLabeled<T>> {
    Ok(SoftLabeled {
        seqs: seqs.to_vec(),
        logits: teacher.predict(seqs, exec)?,
    })
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per sequence, or per token for token heads.
pub fn predict_labels<T: Real>(model: &TransformerModel<T>, seqs: &[Sequence], exec: Execution) -> Result<Vec<Vec<usize>>> {
    let c = model.config().num_classes;
    Ok(model
        .predict(seqs, exec)?
        .iter()
        .map(|z| z.data().chunks(c).map(argmax).collect())
        .collect())
}

pub fn evaluate<T: Real>(model: &TransformerModel<T>, set: &LabeledSet, exec: Execution) -> Result<EvalMetrics> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let preds = predict_labels(model, &set.sequences(), exec)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, e) in preds.iter().zip(&set.examples) {
        match &e.target {
            Target::Class(c) => {
                total += 1;
                hit += usize::from(p[0] == *c);
            }
            Target::Tokens(tags) => {
                for (pi, t) in p.iter().zip(tags) {
                    if let Some(t) = t {
                        total += 1;
                        hit += usize::from(pi == t);
                    }
                }
            }
        }
    }
    Ok(EvalMetrics {
        examples: set.len(),
        accuracy: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Run each epoch with a fresh optimizer and its own shuffling seed.
    /// Helps small encoders trained from scratch leave early plateaus.
    pub restart_each_epoch: bool,
    pub execution: Execution,
}

impl Default for FineTuneOptions {
    fn default() -> Self {
        FineTuneOptions {
            epochs: 3,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            validation_fraction: 0.1,
            restart_each_epoch: false,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FineTuneReport {
    pub stage: Option<StageReport>,
    pub records: Vec<StepRecord>,
    pub validation: Option<EvalMetrics>,
}

/// Cross-entropy training of every non-frozen parameter on the first part
/// of `set`, evaluated on its held-out tail.
pub fn fine_tune<T: Real>(
    model: &mut TransformerModel<T>,
    set: &LabeledSet,
    opts: &FineTuneOptions,
    sink: &mut dyn MetricsSink,
) -> Result<FineTuneReport> {
    if set.num_classes != model.config().num_classes {
        return Err(Error::contract(format!(
            "dataset has {} classes, model head has {}",
            set.num_classes,
            model.config().num_classes
        )));
    }
    let (train, val) = set.split_validation(opts.validation_fraction);
    let mut ctx = RunContext::new(opts.seed, opts.execution, sink);
    let stage = if opts.epochs == 0 {
        None
    } else {
        let (rounds, per_round) = if opts.restart_each_epoch {
            (opts.epochs, 1)
        } else {
            (1, opts.epochs)
        };
        let plan = StagePlan {
            id: 0,
            losses: vec![LossKind::Ce],
            data: DataKind::HardLabeled,
            trainable: ParamGroup::All,
            epochs: per_round,
            lr: opts.lr,
            batch_size: opts.batch_size,
            last_layer_only: false,
        };
        let mut merged: Option<StageReport> = None;
        for round in 0..rounds {
            ctx.seed = opts.seed.wrapping_add(round as u64);
            let r = run_stage(&plan, None, model, None, StageData::Hard(&train), &mut ctx)?;
            merged = Some(match merged {
                None => r,
                Some(m) => StageReport {
                    steps: m.steps + r.steps,
                    epochs: m.epochs + r.epochs,
                    before: m.before,
                    ..r
                },
            });
        }
        merged
    };
    let validation = if val.is_empty() {
        None
    } else {
        Some(evaluate(model, &val, opts.execution)?)
    };
    Ok(FineTuneReport {
        stage,
        records: ctx.records,
        validation,
    })
}
