//! WordPiece vocabulary and tokenization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Prefix marking a word-internal piece.
pub const CONTINUATION: &str = "##";

/// Words longer than this many characters map straight to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

/// Token vocabulary with dense ids `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
}

impl Vocab {
    /// Build from tokens in id order. The four specials must be present.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Data(format!("empty token at vocabulary line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let special = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Data(format!("vocabulary lacks special token {s}")))
        };
        Ok(Vocab {
            pad: special(PAD)?,
            unk: special(UNK)?,
            cls: special(CLS)?,
            sep: special(SEP)?,
            tokens,
            index,
        })
    }

    /// One token per line; the line number is the id.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    /// Greedy longest-match WordPiece split of a single word. A word with any
    /// unmatched remainder becomes a single `[UNK]`.
    pub fn wordpiece(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            return vec![self.unk];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let mut found = None;
            let mut end = chars.len();
            while end > start {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.extend(&chars[start..end]);
                if let Some(id) = self.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => pieces.push(id),
                None => return vec![self.unk],
            }
            start = end;
        }
        pieces
    }

    /// Lowercase, split on whitespace and isolate ASCII punctuation, then
    /// WordPiece every word.
    pub fn tokenize_text(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().flat_map(|w| self.wordpiece(w)).collect()
    }
}

/// Basic pre-tokenization: lowercase, whitespace split, punctuation as
/// separate words.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else {
                cur.extend(c.to_lowercase());
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

/// Token ids, segment ids and padding mask of one encoded example.
///
/// `mask[i]` is false exactly at `[PAD]` positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub mask: Vec<bool>,
}

impl Encoding {
    /// Number of non-padding positions.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Drop trailing padding.
    pub fn to_sequence(&self) -> Sequence {
        let n = self.mask.iter().rposition(|&m| m).map_or(0, |i| i + 1);
        Sequence {
            ids: self.ids[..n].to_vec(),
            segments: self.segments[..n].to_vec(),
        }
    }
}

/// Unpadded token and segment ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sequence {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encode `text` (and optionally a second segment) as
/// `[CLS] a.. [SEP] (b.. [SEP])`, truncated longest-first to `max_len`
/// and right-padded with `[PAD]` up to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, pair: Option<&str>, max_len: usize) -> Result<Encoding> {
    if text.trim().is_empty() || pair.is_some_and(|p| p.trim().is_empty()) {
        return Err(Error::contract("cannot tokenize empty text"));
    }
    let specials = if pair.is_some() { 3 } else { 2 };
    if max_len < specials + if pair.is_some() { 2 } else { 1 } {
        return Err(Error::contract(format!(
            "max_len {max_len} leaves no room for content"
        )));
    }
    let mut a = vocab.tokenize_text(text);
    let mut b = pair.map(|p| vocab.tokenize_text(p)).unwrap_or_default();
    while a.len() + b.len() + specials > max_len {
        if b.len() > a.len() {
            b.pop();
        } else {
            a.pop();
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(vocab.cls_id());
    ids.extend(&a);
    ids.push(vocab.sep_id());
    segments.resize(ids.len(), 0);
    if pair.is_some() {
        ids.extend(&b);
        ids.push(vocab.sep_id());
        segments.resize(ids.len(), 1);
    }
    let valid = ids.len();
    ids.resize(max_len, vocab.pad_id());
    segments.resize(max_len, 0);
    let mask = (0..max_len).map(|i| i < valid).collect();
    Ok(Encoding { ids, segments, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(extra: &[&str]) -> Vocab {
        let mut t = vec![PAD, UNK, CLS, SEP];
        t.extend_from_slice(extra);
        Vocab::from_tokens(t).unwrap()
    }

    fn names(v: &Vocab, e: &Encoding) -> Vec<String> {
        e.ids
            .iter()
            .zip(&e.mask)
            .filter(|(_, &m)| m)
            .map(|(&i, _)| v.token(i).unwrap().to_string())
            .collect()
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab(&["ab", "##c", "a", "##bc"]);
        // "ab" is longer than "a", so ab + ##c wins over a + ##bc.
        let e = tokenize("abc", &v, None, 8).unwrap();
        assert_eq!(names(&v, &e), ["[CLS]", "ab", "##c", "[SEP]"]);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = vocab(&["ab"]);
        let e = tokenize("x", &v, None, 8).unwrap();
        assert_eq!(names(&v, &e), ["[CLS]", "[UNK]", "[SEP]"]);
        // a word with an unmatched tail is wholly unknown
        assert_eq!(v.wordpiece("abz"), vec![v.unk_id()]);
    }

    #[test]
    fn pair_layout_and_segments() {
        let v = vocab(&["a", "b"]);
        let e = tokenize("a", &v, Some("b"), 5).unwrap();
        assert_eq!(names(&v, &e), ["[CLS]", "a", "[SEP]", "b", "[SEP]"]);
        assert_eq!(e.segments, [0, 0, 0, 1, 1]);
        assert!(e.mask.iter().all(|&m| m));
    }

    #[test]
    fn pads_and_truncates() {
        let v = vocab(&["a", "b"]);
        let e = tokenize("a a a a a", &v, Some("b b"), 7).unwrap();
        assert_eq!(e.ids.len(), 7);
        assert_eq!(names(&v, &e), ["[CLS]", "a", "a", "[SEP]", "b", "b", "[SEP]"]);
        let e = tokenize("a", &v, None, 6).unwrap();
        assert_eq!(e.valid_len(), 3);
        assert_eq!(e.ids[3..], [v.pad_id(); 3]);
        assert_eq!(e.to_sequence().len(), 3);
    }

    #[test]
    fn empty_text_rejected() {
        let v = vocab(&[]);
        assert!(tokenize("  ", &v, None, 8).is_err());
        assert!(tokenize("a", &v, Some(""), 8).is_err());
    }

    #[test]
    fn punctuation_and_case() {
        assert_eq!(split_words("Hello, World!"), ["hello", ",", "world", "!"]);
    }

    #[test]
    fn vocab_requires_specials_and_unique_tokens() {
        assert!(Vocab::from_tokens(["[PAD]", "[UNK]", "[CLS]"]).is_err());
        assert!(Vocab::from_tokens([PAD, UNK, CLS, SEP, "a", "a"]).is_err());
    }
}
