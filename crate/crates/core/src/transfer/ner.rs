//! Token classification data under BIO tags and exact-match span F1.

use std::collections::BTreeSet;
use std::io::BufRead;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::real::Real;
use crate::trainer::{predict_labels, Example, LabeledSet, Target};
use crate::transformer::{Sequence, TransformerModel, Vocab};

pub const OUTSIDE: &str = "O";

/// One sentence of `token<TAB>tag` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NerSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

/// Parse `token<TAB>tag` lines with blank lines between sentences.
pub fn read_ner(reader: impl BufRead) -> Result<Vec<NerSentence>> {
    let mut out = Vec::new();
    let mut cur = NerSentence {
        tokens: Vec::new(),
        tags: Vec::new(),
    };
    let mut offset = 0u64;
    for line in reader.split(b'\n') {
        let raw = line?;
        let start = offset;
        offset += raw.len() as u64 + 1;
        let text = std::str::from_utf8(&raw).map_err(|e| Error::Parse {
            offset: start + e.valid_up_to() as u64,
            reason: "invalid UTF-8".into(),
        })?;
        let text = text.trim_end_matches('\r');
        if text.trim().is_empty() {
            if !cur.tokens.is_empty() {
                out.push(std::mem::replace(
                    &mut cur,
                    NerSentence {
                        tokens: Vec::new(),
                        tags: Vec::new(),
                    },
                ));
            }
            continue;
        }
        let (tok, tag) = text.split_once('\t').ok_or_else(|| Error::Parse {
            offset: start,
            reason: "expected `token<TAB>tag`".into(),
        })?;
        let tag = tag.trim();
        if !is_valid_tag(tag) {
            return Err(Error::Parse {
                offset: start + tok.len() as u64 + 1,
                reason: format!("`{tag}` is not a BIO tag"),
            });
        }
        cur.tokens.push(tok.to_string());
        cur.tags.push(tag.to_string());
    }
    if !cur.tokens.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

fn is_valid_tag(tag: &str) -> bool {
    tag == OUTSIDE || tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-")).is_some_and(|t| !t.is_empty())
}

/// Ordered tag inventory; `O` is always class 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TagSet {
    tags: Vec<String>,
}

impl TagSet {
    /// `O` followed by every other tag in sorted order.
    pub fn from_sentences(sentences: &[NerSentence]) -> Self {
        let rest: BTreeSet<&str> = sentences
            .iter()
            .flat_map(|s| s.tags.iter().map(String::as_str))
            .filter(|t| *t != OUTSIDE)
            .collect();
        let mut tags = vec![OUTSIDE.to_string()];
        tags.extend(rest.into_iter().map(str::to_string));
        TagSet { tags }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn tag(&self, id: usize) -> &str {
        self.tags.get(id).map_or(OUTSIDE, String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span<'t> {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub label: &'t str,
}

/// Entity spans of a BIO sequence. `I-X` that does not continue an `X` span
/// opens a new one.
pub fn spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span<'_>> {
    let mut out: Vec<Span<'_>> = Vec::new();
    let mut open = false;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if let Some(label) = tag.strip_prefix("I-") {
            if let Some(last) = out.last_mut().filter(|s| open && s.label == label && s.end == i) {
                last.end = i + 1;
                continue;
            }
            out.push(Span {
                start: i,
                end: i + 1,
                label,
            });
            open = true;
        } else if let Some(label) = tag.strip_prefix("B-") {
            out.push(Span {
                start: i,
                end: i + 1,
                label,
            });
            open = true;
        } else {
            open = false;
        }
    }
    out
}

/// Span counts and the scores derived from them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SpanScore {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanScore {
    pub fn add(&mut self, other: SpanScore) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    /// Harmonic mean of precision and recall; 1 when there is nothing to
    /// find and nothing was predicted.
    pub fn f1(&self) -> f64 {
        if self.gold == 0 && self.predicted == 0 {
            return 1.0;
        }
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Exact-match span counts summed over sentences.
pub fn span_score<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<SpanScore> {
    if gold.len() != pred.len() {
        return Err(Error::contract(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut total = SpanScore::default();
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::contract(format!(
                "sentence {i}: {} gold tags but {} predicted",
                g.len(),
                p.len()
            )));
        }
        let gs: BTreeSet<Span<'_>> = spans(g).into_iter().collect();
        let ps: BTreeSet<Span<'_>> = spans(p).into_iter().collect();
        total.add(SpanScore {
            correct: gs.intersection(&ps).count(),
            predicted: ps.len(),
            gold: gs.len(),
        });
    }
    Ok(total)
}

/// Unweighted mean of per-language F1.
pub fn macro_f1(per_language: &[SpanScore]) -> f64 {
    if per_language.is_empty() {
        return 0.0;
    }
    per_language.iter().map(SpanScore::f1).sum::<f64>() / per_language.len() as f64
}

/// Tokenized sentences plus where each kept word starts.
#[derive(Debug, Clone)]
pub struct NerEncoded {
    pub set: LabeledSet,
    /// Per sentence, the position of each kept word's first piece.
    pub word_starts: Vec<Vec<usize>>,
}

/// Encode sentences as `[CLS] pieces.. [SEP]`. Each word's label sits on
/// its first piece; continuation pieces and specials are unscored. Words
/// that do not fit in `max_len` are dropped from the end.
pub fn encode_ner(sentences: &[NerSentence], vocab: &Vocab, tags: &TagSet, max_len: usize) -> Result<NerEncoded> {
    if max_len < 3 {
        return Err(Error::contract(format!("max_len {max_len} leaves no room for words")));
    }
    let mut examples = Vec::with_capacity(sentences.len());
    let mut word_starts = Vec::with_capacity(sentences.len());
    for (si, s) in sentences.iter().enumerate() {
        let mut ids = vec![vocab.cls_id()];
        let mut labels = vec![None];
        let mut starts = Vec::new();
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            let mut pieces = vocab.wordpiece(&tok.to_lowercase());
            if pieces.is_empty() {
                pieces.push(vocab.unk_id());
            }
            if ids.len() + pieces.len() + 1 > max_len {
                break;
            }
            let id = tags
                .id(tag)
                .ok_or_else(|| Error::Data(format!("sentence {si}: tag `{tag}` is not in the tag set")))?;
            starts.push(ids.len());
            labels.push(Some(id));
            labels.extend(std::iter::repeat_n(None, pieces.len() - 1));
            ids.extend(pieces);
        }
        ids.push(vocab.sep_id());
        labels.push(None);
        let segments = vec![0; ids.len()];
        examples.push(Example {
            seq: Sequence { ids, segments },
            target: Target::Tokens(labels),
        });
        word_starts.push(starts);
    }
    Ok(NerEncoded {
        set: LabeledSet::new(examples, tags.len())?,
        word_starts,
    })
}

/// Span score of a token-head model on labeled sentences.
pub fn evaluate_ner<T: Real>(
    model: &TransformerModel<T>,
    sentences: &[NerSentence],
    vocab: &Vocab,
    tags: &TagSet,
    exec: Execution,
) -> Result<SpanScore> {
    let enc = encode_ner(sentences, vocab, tags, model.config().max_seq_len)?;
    let preds = predict_labels(model, &enc.set.sequences(), exec)?;
    let mut gold = Vec::with_capacity(sentences.len());
    let mut pred = Vec::with_capacity(sentences.len());
    for ((s, starts), p) in sentences.iter().zip(&enc.word_starts).zip(&preds) {
        gold.push(s.tags[..starts.len()].to_vec());
        pred.push(starts.iter().map(|&i| tags.tag(p[i]).to_string()).collect::<Vec<_>>());
    }
    span_score(&gold, &pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_extraction() {
        let t = ["B-PER", "I-PER", "O", "I-LOC", "B-LOC", "I-ORG"];
        let s = spans(&t);
        let got: Vec<(usize, usize, &str)> = s.iter().map(|s| (s.start, s.end, s.label)).collect();
        assert_eq!(got, [(0, 2, "PER"), (3, 4, "LOC"), (4, 5, "LOC"), (5, 6, "ORG")]);
    }

    #[test]
    fn hand_scored_f1() {
        let gold = vec![vec!["B-PER", "I-PER", "O", "B-LOC"]];
        let pred = vec![vec!["B-PER", "I-PER", "O", "O"]];
        let s = span_score(&gold, &pred).unwrap();
        assert_eq!((s.correct, s.predicted, s.gold), (1, 1, 2));
        assert!((s.f1() - 2.0 / 3.0).abs() < 1e-12);
        // A partially matching span earns nothing.
        let pred = vec![vec!["B-PER", "O", "O", "B-LOC"]];
        assert_eq!(span_score(&gold, &pred).unwrap().correct, 1);
    }

    #[test]
    fn macro_average_is_unweighted() {
        let a = SpanScore {
            correct: 1,
            predicted: 1,
            gold: 1,
        };
        let b = SpanScore {
            correct: 0,
            predicted: 10,
            gold: 10,
        };
        assert_eq!(macro_f1(&[a, b]), 0.5);
    }

    #[test]
    fn reads_blank_separated_sentences() {
        let text = "Ana\tB-PER\nruns\tO\n\n\nParis\tB-LOC\n";
        let s = read_ner(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].tags, ["B-PER", "O"]);
        let err = read_ner("ok\tO\nbad line\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 5, .. }), "{err}");
        assert!(read_ner("x\tX-FOO\n".as_bytes()).is_err());
    }

    #[test]
    fn labels_sit_on_first_pieces() {
        let vocab = Vocab::from_tokens(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "run", "##s", "ana"]).unwrap();
        let sents = vec![NerSentence {
            tokens: vec!["Ana".into(), "runs".into()],
            tags: vec!["B-PER".into(), "O".into()],
        }];
        let tags = TagSet::from_sentences(&sents);
        let enc = encode_ner(&sents, &vocab, &tags, 16).unwrap();
        assert_eq!(enc.word_starts[0], [1, 2]);
        match &enc.set.examples[0].target {
            Target::Tokens(t) => assert_eq!(t, &[None, Some(1), Some(0), None, None]),
            other => panic!("{other:?}"),
        }
    }
}
