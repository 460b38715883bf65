//! Seeded synthetic sentence-pair tasks.
//!
//! Sentences are built from pseudo-words. Each belongs to one of several
//! topics and mixes words of its topic with shared filler words, an optional
//! plural suffix that tokenizes as a `##s` continuation, and occasional
//! distractor words from other topics. A second sentence may also carry the
//! negation word [`NEGATION`].
//!
//! * The three-class pair task labels a pair *entail* (same topic, no
//!   negation), *contradict* (same topic, negated) or *neutral* (different
//!   topics, negated half of the time so negation alone is not a cue).
//! * The binary pair task only asks whether both sentences share a topic.
//!   Its signal is a strict subset of the three-class task's.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{Example, LabeledSet, Target};
use crate::transformer::{tokenize, Sequence, Vocab, CLS, PAD, SEP, UNK};

pub const ENTAIL: usize = 0;
pub const CONTRADICT: usize = 1;
pub const NEUTRAL: usize = 2;

/// Negation word inserted into the second sentence.
pub const NEGATION: &str = "not";

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "v"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub words_per_topic: usize,
    pub fillers: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a word is a topic word rather than filler.
    pub topic_rate: f64,
    /// Probability that a topic word is replaced by one from another topic.
    pub distractor_rate: f64,
    pub plural_rate: f64,
    pub max_seq_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            topics: 4,
            words_per_topic: 6,
            fillers: 16,
            min_words: 3,
            max_words: 6,
            topic_rate: 0.8,
            distractor_rate: 0.05,
            plural_rate: 0.2,
            max_seq_len: 32,
        }
    }
}

/// Raw text pair with its label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPair {
    pub first: String,
    pub second: String,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    spec: SyntheticSpec,
    topic_words: Vec<Vec<String>>,
    fillers: Vec<String>,
    vocab: Vocab,
}

fn pseudo_word(mut i: usize) -> String {
    let mut s = String::new();
    for _ in 0..3 {
        s.push_str(ONSETS[i % ONSETS.len()]);
        i /= ONSETS.len();
        s.push_str(VOWELS[i % VOWELS.len()]);
        i /= VOWELS.len();
    }
    s
}

impl SyntheticTask {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        if spec.topics < 2 {
            return Err(Error::Config("synthetic tasks need at least 2 topics".into()));
        }
        if spec.words_per_topic == 0 || spec.fillers == 0 || spec.min_words == 0 || spec.min_words > spec.max_words {
            return Err(Error::Config("synthetic word counts must be positive and ordered".into()));
        }
        // Longest pair: two sentences with every word pluralized, a negation
        // and 3 specials.
        if 4 * spec.max_words + 4 > spec.max_seq_len {
            return Err(Error::Config(format!(
                "max_seq_len {} is too short for {} words per sentence",
                spec.max_seq_len, spec.max_words
            )));
        }
        // Spread ids so neighbouring words differ in their first syllable.
        let mut next = 0usize;
        let mut word = || {
            let w = pseudo_word(next * 7 + 3);
            next += 1;
            w
        };
        let topic_words: Vec<Vec<String>> = (0..spec.topics)
            .map(|_| (0..spec.words_per_topic).map(|_| word()).collect())
            .collect();
        let fillers: Vec<String> = (0..spec.fillers).map(|_| word()).collect();
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        tokens.push("##s".into());
        tokens.push(NEGATION.into());
        tokens.extend(topic_words.iter().flatten().cloned());
        tokens.extend(fillers.iter().cloned());
        let vocab = Vocab::from_tokens(tokens)?;
        Ok(SyntheticTask {
            spec,
            topic_words,
            fillers,
            vocab,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// A sentence about `topic`.
    pub fn sentence<R: Rng>(&self, topic: usize, rng: &mut R) -> String {
        let s = &self.spec;
        let len = rng.random_range(s.min_words..=s.max_words);
        let anchor = rng.random_range(0..len);
        let mut words = Vec::with_capacity(len);
        for i in 0..len {
            let mut w = if i == anchor || rng.random_bool(s.topic_rate) {
                let t = if i != anchor && rng.random_bool(s.distractor_rate) {
                    rng.random_range(0..s.topics)
                } else {
                    topic
                };
                self.topic_words[t][rng.random_range(0..s.words_per_topic)].clone()
            } else {
                self.fillers[rng.random_range(0..self.fillers.len())].clone()
            };
            if rng.random_bool(s.plural_rate) {
                w.push('s');
            }
            words.push(w);
        }
        words.join(" ")
    }

    /// Three-class pair.
    pub fn pair<R: Rng>(&self, rng: &mut R) -> TextPair {
        let a = rng.random_range(0..self.spec.topics);
        let label = rng.random_range(0..3);
        let b = if label == NEUTRAL {
            (a + rng.random_range(1..self.spec.topics)) % self.spec.topics
        } else {
            a
        };
        let negate = match label {
            ENTAIL => false,
            CONTRADICT => true,
            _ => rng.random_bool(0.5),
        };
        let first = self.sentence(a, rng);
        let mut second = self.sentence(b, rng);
        if negate {
            let mut words: Vec<&str> = second.split(' ').collect();
            let at = rng.random_range(0..=words.len());
            words.insert(at, NEGATION);
            second = words.join(" ");
        }
        TextPair { first, second, label }
    }

    pub fn pairs(&self, n: usize, seed: u64) -> Vec<TextPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.pair(&mut rng)).collect()
    }

    /// Same topic (1) or not (0), derived from the three-class label.
    pub fn binary_label(label: usize) -> usize {
        usize::from(label != NEUTRAL)
    }

    pub fn encode(&self, p: &TextPair) -> Result<Sequence> {
        Ok(tokenize(&p.first, &self.vocab, Some(&p.second), self.spec.max_seq_len)?.to_sequence())
    }

    /// Tokenized three-class set.
    pub fn labeled(&self, n: usize, seed: u64) -> Result<LabeledSet> {
        let ex = self
            .pairs(n, seed)
            .iter()
            .map(|p| {
                Ok(Example {
                    seq: self.encode(p)?,
                    target: Target::Class(p.label),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledSet::new(ex, 3)
    }

    /// Tokenized binary same-topic set.
    pub fn binary(&self, n: usize, seed: u64) -> Result<LabeledSet> {
        let ex = self
            .pairs(n, seed)
            .iter()
            .map(|p| {
                Ok(Example {
                    seq: self.encode(p)?,
                    target: Target::Class(Self::binary_label(p.label)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledSet::new(ex, 2)
    }

    /// Unlabeled tokenized pairs.
    pub fn transfer(&self, n: usize, seed: u64) -> Result<Vec<Sequence>> {
        self.pairs(n, seed).iter().map(|p| self.encode(p)).collect()
    }
}
