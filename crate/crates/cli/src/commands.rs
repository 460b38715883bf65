//! Subcommand bodies. Each returns the summary object printed on stdout.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use xdistil_core::checkpoint::{load_checkpoint, read_container, save_checkpoint};
use xdistil_core::metrics::JsonlWriter;
use xdistil_core::suites::{find, run_suite, Suite, SUITES};
use xdistil_core::trainer::{distil, evaluate, fine_tune, StudentInit};
use xdistil_core::transfer::ner::evaluate_ner;
use xdistil_core::transfer::{
    build_transfer_pairs, read_corpus, read_pairs, read_precomputed, select_best_source, swap_embeddings, write_pairs,
    Corpus, Embedder, EvalMatrix, HashedEmbedder, PrecomputedEmbedder, SentencePairBank,
};
use xdistil_core::transformer::{names, TransformerModel, Vocab};
use xdistil_core::{Error, Real, Result};

use crate::config::RunConfig;
use crate::data::Dataset;

pub const REPORT: &str = "report.jsonl";
pub const TEACHER_REPORT: &str = "teacher_report.jsonl";

/// Outcome of a subcommand: the stdout summary and whether it succeeded.
pub struct Outcome {
    pub summary: Value,
    pub ok: bool,
}

impl Outcome {
    fn ok(summary: Value) -> Self {
        Outcome { summary, ok: true }
    }
}

fn path_or<'p>(p: &'p Option<PathBuf>, key: &str) -> Result<&'p Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` must be set")))
}

/// Output directory plus a fresh `report.jsonl` in it.
fn prepare(cfg: &RunConfig) -> Result<JsonlWriter<std::io::BufWriter<File>>> {
    fs::create_dir_all(&cfg.output_dir)?;
    JsonlWriter::create(cfg.output_dir.join(REPORT))
}

fn test_metrics<T: Real>(model: &TransformerModel<T>, data: &Dataset, cfg: &RunConfig) -> Result<Value> {
    let c = model.config();
    if c.num_classes != data.shape.num_classes || c.head != data.shape.head {
        return Err(Error::Config(format!(
            "model has a {:?} head with {} classes, data needs {:?} with {}",
            c.head, c.num_classes, data.shape.head, data.shape.num_classes
        )));
    }
    let acc = evaluate(model, &data.test, cfg.execution)?;
    let mut v = json!({ "examples": acc.examples, "accuracy": acc.accuracy });
    if let Some(ner) = &data.ner {
        let s = evaluate_ner(model, &ner.sentences, &data.vocab, &ner.tags, cfg.execution)?;
        v["span_f1"] = json!(s.f1());
        v["span_precision"] = json!(s.precision());
        v["span_recall"] = json!(s.recall());
    }
    Ok(v)
}

pub fn finetune<T: Real>(cfg: &RunConfig) -> Result<Outcome> {
    let started = Instant::now();
    let mut sink = prepare(cfg)?;
    let data = Dataset::load(&cfg.data, cfg.seed, false)?;
    let mut model = match &cfg.finetune.checkpoint {
        Some(p) => {
            let mut m = load_checkpoint::<T>(p)?;
            let c = m.config();
            if c.num_classes != data.shape.num_classes || c.head != data.shape.head {
                m.reset_classifier(data.shape.num_classes, data.shape.head, cfg.seed)?;
            }
            m
        }
        None => TransformerModel::random(cfg.finetune.model.resolve(&data.shape)?, cfg.seed)?,
    };
    let opts = cfg.finetune.train.options(cfg.seed, cfg.execution);
    let report = fine_tune(&mut model, &data.train, &opts, &mut sink)?;
    let out = cfg.output_dir.join("model.xdtc");
    save_checkpoint(&model, &out)?;
    Ok(Outcome::ok(json!({
        "command": "finetune",
        "checkpoint": out,
        "steps": report.records.len(),
        "validation": report.validation,
        "test": test_metrics(&model, &data, cfg)?,
        "wall_ms": started.elapsed().as_millis() as u64,
    })))
}

/// Load the configured teacher, or fine-tune one on the labeled data and
/// save it next to the student.
fn teacher<T: Real>(cfg: &RunConfig, data: &Dataset) -> Result<(TransformerModel<T>, Value)> {
    if let Some(p) = &cfg.teacher.checkpoint {
        return Ok((load_checkpoint(p)?, json!({ "checkpoint": p, "trained": false })));
    }
    let mut model = TransformerModel::<T>::random(cfg.teacher.model.resolve(&data.shape)?, cfg.seed)?;
    let mut sink = JsonlWriter::create(cfg.output_dir.join(TEACHER_REPORT))?;
    let opts = cfg.teacher.train.options(cfg.seed, cfg.execution);
    let report = fine_tune(&mut model, &data.train, &opts, &mut sink)?;
    let out = cfg.output_dir.join("teacher.xdtc");
    save_checkpoint(&model, &out)?;
    Ok((
        model,
        json!({ "checkpoint": out, "trained": true, "steps": report.records.len(), "validation": report.validation }),
    ))
}

pub fn distil_cmd<T: Real>(cfg: &RunConfig) -> Result<Outcome> {
    let started = Instant::now();
    let mut sink = prepare(cfg)?;
    let data = Dataset::load(&cfg.data, cfg.seed, true)?;
    data.vocab.write_file(cfg.output_dir.join("vocab.txt"))?;
    let (teacher, teacher_info) = teacher::<T>(cfg, &data)?;

    let loaded;
    let arch;
    let init = match (&cfg.student.checkpoint, &cfg.student.seed_checkpoint) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "set at most one of `student.checkpoint` and `student.seed_checkpoint`".into(),
            ))
        }
        (Some(p), None) => {
            loaded = load_checkpoint::<T>(p)?;
            StudentInit::FromCheckpoint(&loaded)
        }
        (None, Some(p)) => {
            loaded = load_checkpoint::<T>(p)?;
            StudentInit::FromStudentSeed(&loaded)
        }
        (None, None) => {
            arch = cfg.student.model.resolve(&data.shape)?;
            StudentInit::Random(&arch)
        }
    };
    let dc = cfg.distil.to_config(cfg.seed, cfg.execution);
    let outcome = distil(&dc, &teacher, init, &data.transfer, &data.train, &mut sink)?;
    let out = cfg.output_dir.join("student.xdtc");
    save_checkpoint(&outcome.student, &out)?;
    let stages: Vec<Value> = outcome
        .report
        .stages
        .iter()
        .map(|s| {
            json!({
                "stage": s.stage,
                "steps": s.steps,
                "final_loss": s.final_loss,
                "encoder_unchanged": s.before.encoder == s.after.encoder,
                "teacher_unchanged": s.teacher_before == s.teacher_after,
            })
        })
        .collect();
    Ok(Outcome::ok(json!({
        "command": "distil",
        "checkpoint": out,
        "teacher": teacher_info,
        "teacher_test": test_metrics(&teacher, &data, cfg)?,
        "steps": outcome.report.records.len(),
        "stages": stages,
        "teacher_hash": outcome.report.teacher_hash,
        "student_hash": outcome.student.params().hash(),
        "validation": outcome.report.validation,
        "test": test_metrics(&outcome.student, &data, cfg)?,
        "wall_ms": started.elapsed().as_millis() as u64,
    })))
}

pub fn select_task(cfg: &RunConfig) -> Result<Outcome> {
    prepare(cfg)?;
    let path = path_or(&cfg.select.matrix, "select.matrix")?;
    let m = EvalMatrix::from_csv(BufReader::new(File::open(path)?))?;
    let s = select_best_source(&m);
    Ok(Outcome::ok(json!({
        "command": "select-task",
        "best": s.best,
        "average": s.average,
        "averages": s.averages,
    })))
}

pub fn augment(cfg: &RunConfig) -> Result<Outcome> {
    let started = Instant::now();
    prepare(cfg)?;
    let a = &cfg.augment;
    let pairs = read_pairs(path_or(&a.pairs, "augment.pairs")?)?;
    let sentences = read_corpus(path_or(&a.corpus, "augment.corpus")?)?;
    let embedder: Box<dyn Embedder> = match &a.embeddings {
        Some(p) => Box::new(PrecomputedEmbedder::new(&sentences, read_precomputed(p)?)?),
        None => Box::new(HashedEmbedder::new(a.dim)?),
    };
    let corpus_len = sentences.len();
    let corpus = Corpus::build(sentences, embedder.as_ref(), cfg.execution)?;
    let source_pairs = pairs.len();
    let bank = SentencePairBank {
        pairs,
        corpus,
        embedder: embedder.as_ref(),
    };
    let out_pairs = build_transfer_pairs(&bank, a.k, cfg.execution)?;
    let out = a.output.clone().unwrap_or_else(|| cfg.output_dir.join("augmented.tsv"));
    write_pairs(&out, &out_pairs)?;
    Ok(Outcome::ok(json!({
        "command": "augment",
        "output": out,
        "source_pairs": source_pairs,
        "corpus": corpus_len,
        "k": a.k,
        "pairs": out_pairs.len(),
        "wall_ms": started.elapsed().as_millis() as u64,
    })))
}

pub fn swap<T: Real>(cfg: &RunConfig) -> Result<Outcome> {
    prepare(cfg)?;
    let s = &cfg.swap;
    let student = load_checkpoint::<T>(path_or(&s.checkpoint, "swap.checkpoint")?)?;
    let vocab = Vocab::from_file(path_or(&s.vocab, "swap.vocab")?)?;
    let container = read_container(path_or(&s.embeddings, "swap.embeddings")?)?;
    let table = match container.tensors.iter().find(|(n, _)| n == names::WORD) {
        Some((_, t)) => t.clone(),
        None if container.tensors.len() == 1 => container.tensors[0].1.clone(),
        None => {
            return Err(Error::Data(format!(
                "embedding file holds {} tensors and none is named `{}`",
                container.tensors.len(),
                names::WORD
            )))
        }
    };
    let swapped = swap_embeddings(&student, &vocab, &table.cast::<T>())?;
    let out = s.output.clone().unwrap_or_else(|| cfg.output_dir.join("swapped.xdtc"));
    save_checkpoint(&swapped, &out)?;
    Ok(Outcome::ok(json!({
        "command": "swap-embeddings",
        "checkpoint": out,
        "vocab_size": swapped.config().vocab_size,
        "encoder_hash_before": student.params().hash_where(|n| n != names::WORD),
        "encoder_hash_after": swapped.params().hash_where(|n| n != names::WORD),
        "embedding_hash": swapped.params().hash_where(|n| n == names::WORD),
    })))
}

pub fn eval<T: Real>(cfg: &RunConfig) -> Result<Outcome> {
    prepare(cfg)?;
    let model = load_checkpoint::<T>(path_or(&cfg.eval.checkpoint, "eval.checkpoint")?)?;
    let data = Dataset::load(&cfg.data, cfg.seed, false)?;
    Ok(Outcome::ok(json!({
        "command": "eval",
        "parameters": model.config().num_parameters(),
        "test": test_metrics(&model, &data, cfg)?,
    })))
}

/// Always runs in 64-bit precision: finite differences in f32 are too
/// coarse for a 1e-4 relative threshold.
pub fn gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    prepare(cfg)?;
    let g = &cfg.gradcheck;
    let suites: Vec<&Suite> = if g.suites.is_empty() {
        SUITES.iter().collect()
    } else {
        g.suites
            .iter()
            .map(|n| find(n).ok_or_else(|| Error::Config(format!("unknown gradient suite `{n}`"))))
            .collect::<Result<_>>()?
    };
    let outcomes = suites
        .iter()
        .map(|s| run_suite(s, cfg.seed, g.tolerance))
        .collect::<Result<Vec<_>>>()?;
    let ok = outcomes.iter().all(|o| o.passed);
    Ok(Outcome {
        summary: json!({
            "command": "gradcheck",
            "tolerance": g.tolerance,
            "passed": ok,
            "suites": outcomes,
        }),
        ok,
    })
}
