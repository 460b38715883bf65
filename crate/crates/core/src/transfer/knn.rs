use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::transformer::split_words;

pub const DEFAULT_K: usize = 10;
pub const HASHED_DIM: usize = 256;

/// Maps a sentence to a unit-norm vector of fixed dimension.
pub trait Embedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, sentence: &str) -> Result<Vec<f64>>;
}

/// Bag of lowercased tokens hashed into `dim` buckets with FNV-1a, then
/// L2-normalized. A sentence with no tokens maps to the first basis vector.
#[derive(Debug, Clone, Copy)]
pub struct HashedEmbedder {
    dim: usize,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(HashedEmbedder { dim })
    }
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        HashedEmbedder { dim: HASHED_DIM }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, sentence: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for w in split_words(sentence) {
            v[(fnv1a(w.to_lowercase().as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Vectors supplied from outside, looked up by exact sentence text.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbedder {
    /// `vectors[i]` belongs to `sentences[i]`. Vectors are normalized here.
    pub fn new(sentences: &[String], vectors: Vec<Vec<f64>>) -> Result<Self> {
        if sentences.len() != vectors.len() {
            return Err(Error::Data(format!(
                "{} sentences but {} vectors",
                sentences.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Data("precomputed embeddings are empty".into()));
        }
        let mut table = HashMap::with_capacity(sentences.len());
        for (i, (s, mut v)) in sentences.iter().zip(vectors).enumerate() {
            if v.len() != dim {
                return Err(Error::Data(format!("vector {i} has dimension {}, expected {dim}", v.len())));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::Data(format!("vector {i} cannot be normalized")));
            }
            v.iter_mut().for_each(|x| *x /= norm);
            table.entry(s.clone()).or_insert(v);
        }
        Ok(PrecomputedEmbedder { dim, table })
    }
}

impl Embedder for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, sentence: &str) -> Result<Vec<f64>> {
        self.table
            .get(sentence)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no precomputed embedding for `{sentence}`")))
    }
}

/// Sentence bank with one embedding per sentence.
#[derive(Debug, Clone)]
pub struct Corpus {
    sentences: Vec<String>,
    dim: usize,
    vectors: Vec<f64>,
}

impl Corpus {
    pub fn build(sentences: Vec<String>, embedder: &dyn Embedder, exec: Execution) -> Result<Self> {
        let dim = embedder.dim();
        let rows = exec.try_map(&sentences, |s| embedder.embed(s))?;
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            vectors.extend(r);
        }
        Corpus::from_vectors(sentences, dim, vectors)
    }

    /// `vectors` is row-major, one unit-norm row per sentence.
    pub fn from_vectors(sentences: Vec<String>, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != sentences.len() * dim {
            return Err(Error::contract(format!(
                "{} values for {} sentences of dimension {dim}",
                vectors.len(),
                sentences.len()
            )));
        }
        for (i, row) in vectors.chunks(dim.max(1)).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("corpus vector {i} has norm {norm}")));
            }
        }
        Ok(Corpus { sentences, dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sentence(&self, i: usize) -> &str {
        &self.sentences[i]
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f64,
}

/// Exact top-`k` corpus entries by cosine similarity to `query`.
///
/// Ties are broken by ascending corpus index.
pub fn knn(query: &[f64], corpus: &Corpus, k: usize) -> Result<Vec<Neighbor>> {
    if k > corpus.len() {
        return Err(Error::contract(format!("k = {k} exceeds corpus size {}", corpus.len())));
    }
    if query.len() != corpus.dim() {
        return Err(Error::shape("knn", &[query.len()], &[corpus.dim()]));
    }
    let mut all: Vec<Neighbor> = (0..corpus.len())
        .map(|i| Neighbor {
            index: i,
            similarity: corpus.vector(i).iter().zip(query).map(|(a, b)| a * b).sum(),
        })
        .collect();
    let by_rank = |a: &Neighbor, b: &Neighbor| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.index.cmp(&b.index))
    };
    if k < all.len() && k > 0 {
        all.select_nth_unstable_by(k - 1, by_rank);
    }
    all.truncate(k);
    all.sort_by(by_rank);
    Ok(all)
}

/// Source pairs plus the sentence bank their neighbours come from.
pub struct SentencePairBank<'e> {
    pub pairs: Vec<(String, String)>,
    pub corpus: Corpus,
    pub embedder: &'e dyn Embedder,
}

/// All `k x k` combinations of the neighbours of each source pair's two
/// sentences, with exact duplicates dropped (first occurrence kept).
pub fn build_transfer_pairs(bank: &SentencePairBank<'_>, k: usize, exec: Execution) -> Result<Vec<(String, String)>> {
    if bank.corpus.is_empty() {
        return Err(Error::contract("cannot augment from an empty corpus"));
    }
    if bank.embedder.dim() != bank.corpus.dim() {
        return Err(Error::contract(format!(
            "embedder dimension {} differs from corpus dimension {}",
            bank.embedder.dim(),
            bank.corpus.dim()
        )));
    }
    let neighbours = exec.try_map(&bank.pairs, |(a, b)| -> Result<(Vec<Neighbor>, Vec<Neighbor>)> {
        Ok((
            knn(&bank.embedder.embed(a)?, &bank.corpus, k)?,
            knn(&bank.embedder.embed(b)?, &bank.corpus, k)?,
        ))
    })?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (left, right) in &neighbours {
        for l in left {
            for r in right {
                let pair = (bank.corpus.sentence(l.index).to_string(), bank.corpus.sentence(r.index).to_string());
                if seen.insert(pair.clone()) {
                    out.push(pair);
                }
            }
        }
    }
    Ok(out)
}
