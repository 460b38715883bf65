//! Datasets for the CLI: the bundled synthetic pair task or user files.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use xdistil_core::synthetic::SyntheticTask;
use xdistil_core::trainer::{Example, LabeledSet, Target};
use xdistil_core::transfer::ner::{encode_ner, NerSentence, TagSet};
use xdistil_core::transfer::{read_corpus, read_ner_file};
use xdistil_core::transformer::{tokenize, HeadKind, Sequence, Vocab};
use xdistil_core::{Error, Result};

use crate::config::{DataConfig, DataShape, DataSource, FileFormat};

/// Test sentences kept in raw form so span F1 can be scored.
pub struct NerTest {
    pub sentences: Vec<NerSentence>,
    pub tags: TagSet,
}

pub struct Dataset {
    pub vocab: Vocab,
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub transfer: Vec<Sequence>,
    pub shape: DataShape,
    pub ner: Option<NerTest>,
}

fn required<'p>(p: &'p Option<std::path::PathBuf>, key: &str) -> Result<&'p Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`data.{key}` is required for file data")))
}

impl Dataset {
    /// Load or generate the data. Synthetic splits draw from seeds derived
    /// from `seed`, so they never overlap in sampling stream.
    pub fn load(cfg: &DataConfig, seed: u64, need_transfer: bool) -> Result<Self> {
        match cfg.source {
            DataSource::Synthetic => Self::synthetic(cfg, seed, need_transfer),
            DataSource::Files => match cfg.format {
                FileFormat::Classification => Self::classification(cfg, need_transfer),
                FileFormat::Ner => Self::ner(cfg, need_transfer),
            },
        }
    }

    fn synthetic(cfg: &DataConfig, seed: u64, need_transfer: bool) -> Result<Self> {
        let task = SyntheticTask::new(cfg.synthetic)?;
        let train = task.labeled(cfg.labeled, seed.wrapping_add(100))?;
        let transfer = if need_transfer {
            task.transfer(cfg.transfer, seed.wrapping_add(200))?
        } else {
            Vec::new()
        };
        let test = task.labeled(cfg.test, seed.wrapping_add(300))?;
        Ok(Dataset {
            shape: DataShape {
                max_seq_len: cfg.synthetic.max_seq_len,
                vocab_size: task.vocab().len(),
                num_classes: train.num_classes,
                head: HeadKind::Sequence,
            },
            vocab: task.vocab().clone(),
            train,
            test,
            transfer,
            ner: None,
        })
    }

    fn classification(cfg: &DataConfig, need_transfer: bool) -> Result<Self> {
        let vocab = Vocab::from_file(required(&cfg.vocab, "vocab")?)?;
        let train_rows = read_labeled(required(&cfg.train, "train")?)?;
        let test_rows = read_labeled(required(&cfg.test_file, "test_file")?)?;
        let classes: Vec<String> = train_rows
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let build = |rows: &[LabeledRow], what: &str| -> Result<LabeledSet> {
            let examples = rows
                .iter()
                .map(|r| {
                    let class = classes.iter().position(|c| *c == r.label).ok_or_else(|| {
                        Error::Data(format!("{what}: label `{}` does not occur in the training file", r.label))
                    })?;
                    let enc = tokenize(&r.first, &vocab, r.second.as_deref(), cfg.max_seq_len)?;
                    Ok(Example {
                        seq: enc.to_sequence(),
                        target: Target::Class(class),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            LabeledSet::new(examples, classes.len())
        };
        let train = build(&train_rows, "train")?;
        let test = build(&test_rows, "test")?;
        let transfer = if need_transfer {
            read_unlabeled(cfg, &vocab)?
        } else {
            Vec::new()
        };
        Ok(Dataset {
            shape: DataShape {
                max_seq_len: cfg.max_seq_len,
                vocab_size: vocab.len(),
                num_classes: classes.len(),
                head: HeadKind::Sequence,
            },
            vocab,
            train,
            test,
            transfer,
            ner: None,
        })
    }

    fn ner(cfg: &DataConfig, need_transfer: bool) -> Result<Self> {
        let vocab = Vocab::from_file(required(&cfg.vocab, "vocab")?)?;
        let train_s = read_ner_file(required(&cfg.train, "train")?)?;
        let test_s = read_ner_file(required(&cfg.test_file, "test_file")?)?;
        let tags = TagSet::from_sentences(&train_s);
        let train = encode_ner(&train_s, &vocab, &tags, cfg.max_seq_len)?.set;
        let test = encode_ner(&test_s, &vocab, &tags, cfg.max_seq_len)?.set;
        let transfer = if need_transfer {
            read_unlabeled(cfg, &vocab)?
        } else {
            Vec::new()
        };
        Ok(Dataset {
            shape: DataShape {
                max_seq_len: cfg.max_seq_len,
                vocab_size: vocab.len(),
                num_classes: tags.len(),
                head: HeadKind::Token,
            },
            vocab,
            train,
            test,
            transfer,
            ner: Some(NerTest { sentences: test_s, tags }),
        })
    }
}

struct LabeledRow {
    label: String,
    first: String,
    second: Option<String>,
}

/// `label<TAB>text[<TAB>second]` per non-blank line.
fn read_labeled(path: &Path) -> Result<Vec<LabeledRow>> {
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let start = offset;
        offset += line.len() as u64 + 1;
        let l = line.trim_end_matches('\r');
        if l.trim().is_empty() {
            continue;
        }
        let mut cols = l.split('\t');
        let label = cols.next().unwrap_or_default().trim();
        let first = cols.next().filter(|t| !t.trim().is_empty()).ok_or_else(|| Error::Parse {
            offset: start,
            reason: "expected `label<TAB>text[<TAB>second]`".into(),
        })?;
        let second = cols.next().map(str::to_string);
        if cols.next().is_some() || label.is_empty() {
            return Err(Error::Parse {
                offset: start,
                reason: "expected `label<TAB>text[<TAB>second]`".into(),
            });
        }
        rows.push(LabeledRow {
            label: label.to_string(),
            first: first.to_string(),
            second,
        });
    }
    Ok(rows)
}

/// Unlabeled inputs: `first<TAB>second` pairs or single sentences.
fn read_unlabeled(cfg: &DataConfig, vocab: &Vocab) -> Result<Vec<Sequence>> {
    let Some(path) = &cfg.transfer_file else {
        return Ok(Vec::new());
    };
    read_corpus(path)?
        .iter()
        .map(|l| {
            let (a, b) = match l.split_once('\t') {
                Some((a, b)) => (a, Some(b)),
                None => (l.as_str(), None),
            };
            Ok(tokenize(a, vocab, b, cfg.max_seq_len)?.to_sequence())
        })
        .collect()
}
