use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{names, AttentionScaling, HeadKind, ModelConfig};
use super::vocab::{Encoding, Sequence};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::real::Real;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;
const PARAMS_PER_LAYER: usize = 16;

/// Encoder plus classifier head, with parameters stored in canonical order.
#[derive(Debug, Clone)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    params: ParamSet<T>,
}

impl<T: Real> PartialEq for TransformerModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Tape handles produced by one forward pass over a single sequence.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `H_1..H_L`, each `[n, d]`.
    pub hidden: Vec<Var>,
    /// Per-layer attention probabilities, each `[heads, n, n]`.
    pub attn: Vec<Var>,
    /// `[C]` for a sequence head, `[n, C]` for a token head.
    pub logits: Var,
}

/// Padded batch of equal-length examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub segments: Vec<Vec<u8>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_encodings(items: &[Encoding]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::contract("empty batch"));
        };
        let n = first.ids.len();
        if items.iter().any(|e| e.ids.len() != n || e.segments.len() != n || e.mask.len() != n) {
            return Err(Error::contract("batch examples must share one padded length"));
        }
        Ok(Batch {
            ids: items.iter().map(|e| e.ids.clone()).collect(),
            segments: items.iter().map(|e| e.segments.clone()).collect(),
            mask: items.iter().map(|e| e.mask.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Dense results of a batch forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput<T> {
    /// `H_1..H_L`, each `[batch, n, d]`.
    pub hidden: Vec<Tensor<T>>,
    /// Each `[batch, heads, n, n]`.
    pub attn: Vec<Tensor<T>>,
    /// `[batch, C]` or `[batch, n, C]`.
    pub logits: Tensor<T>,
}

/// Draw from N(0, std^2) truncated at two standard deviations by resampling.
pub fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Real> TransformerModel<T> {
    /// Wrap an existing parameter set, reordering it canonically. Every
    /// expected tensor must be present with the configured shape.
    pub fn new(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if params.len() != expected.len() {
            if let Some(extra) = params.names().find(|n| !expected.iter().any(|(e, _)| e == n)) {
                return Err(Error::NamedTensor {
                    name: extra.to_string(),
                    reason: "not a parameter of this architecture".into(),
                });
            }
        }
        let mut ordered = ParamSet::new();
        for (name, shape) in &expected {
            let p = params.get(name).ok_or_else(|| Error::NamedTensor {
                name: name.clone(),
                reason: "missing".into(),
            })?;
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::NamedTensor {
                    name: name.clone(),
                    reason: format!("expected shape {:?}, found {:?}", shape, p.tensor.shape()),
                });
            }
            ordered.insert(name.clone(), p.tensor.clone())?;
            ordered.get_mut(name).unwrap().frozen = p.frozen;
        }
        Ok(TransformerModel { config, params: ordered })
    }

    /// Truncated-normal weights (std 0.02), zero biases, unit layer-norm gains.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".gain") {
                Tensor::full(&shape, T::one())
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let data = (0..n).map(|_| T::lit(truncated_normal(&mut rng, INIT_STD))).collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, t)?;
        }
        Ok(TransformerModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> TransformerModel<U> {
        let mut params = ParamSet::new();
        for p in self.params.iter() {
            params.insert(p.name.clone(), p.tensor.cast()).expect("names are unique");
            params.get_mut(&p.name).unwrap().frozen = p.frozen;
        }
        TransformerModel {
            config: self.config.clone(),
            params,
        }
    }

    /// Replace the word-embedding table, possibly changing the vocabulary size.
    pub fn replace_word_embeddings(&mut self, table: Tensor<T>) -> Result<()> {
        let d = self.config.hidden_dim;
        if table.rank() != 2 || table.shape()[1] != d || table.shape()[0] == 0 {
            return Err(Error::NamedTensor {
                name: names::WORD.into(),
                reason: format!("expected shape [vocab, {d}], found {:?}", table.shape()),
            });
        }
        self.config.vocab_size = table.shape()[0];
        self.params.get_mut(names::WORD).expect("word embeddings exist").tensor = table;
        Ok(())
    }

    /// Fresh classifier with `num_classes` outputs, drawn from `seed`.
    pub fn reset_classifier(&mut self, num_classes: usize, head: HeadKind, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.hidden_dim;
        let data = (0..d * num_classes)
            .map(|_| T::lit(truncated_normal(&mut rng, INIT_STD)))
            .collect();
        let p = self.params.get_mut(names::CLASSIFIER).expect("classifier exists");
        p.tensor = Tensor::new(vec![d, num_classes], data)?;
        p.frozen = false;
        self.config.num_classes = num_classes;
        self.config.head = head;
        Ok(())
    }

    /// Hash of every parameter except the task head.
    pub fn encoder_hash(&self) -> String {
        self.params.hash_where(names::is_encoder)
    }

    fn check_input(&self, ids: &[u32], segments: &[u8]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::contract("empty input sequence"));
        }
        if ids.len() != segments.len() {
            return Err(Error::contract(format!(
                "{} token ids but {} segment ids",
                ids.len(),
                segments.len()
            )));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Vocab {
                id: bad as usize,
                size: self.config.vocab_size,
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s > 1) {
            return Err(Error::contract(format!("segment id {bad} is not 0 or 1")));
        }
        Ok(())
    }

    /// Record the encoder and head for one sequence on `tape`.
    ///
    /// `vars` are this model's parameters bound in set order (see
    /// [`ParamSet::bind`]). `mask`, when given, marks real tokens; padded
    /// keys are excluded from attention.
    pub fn encode<'a>(
        &self,
        tape: &mut Tape<'a, T>,
        vars: &[Var],
        ids: &[u32],
        segments: &[u8],
        mask: Option<&[bool]>,
    ) -> Result<Encoded> {
        self.check_input(ids, segments)?;
        if vars.len() != self.params.len() {
            return Err(Error::contract(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let cfg = &self.config;
        let n = ids.len();
        let (d, heads, dh) = (cfg.hidden_dim, cfg.num_heads, cfg.head_dim());
        let valid = match mask {
            Some(m) if m.len() != n => {
                return Err(Error::contract(format!("mask length {} for {} tokens", m.len(), n)))
            }
            Some(m) => m.iter().filter(|&&v| v).count(),
            None => n,
        };
        if valid == 0 {
            return Err(Error::contract("every position is padding"));
        }

        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let segs: Vec<usize> = segments.iter().map(|&s| s as usize).collect();
        let w = tape.gather_rows(vars[0], &ids)?;
        let p = tape.gather_rows(vars[1], &positions)?;
        let s = tape.gather_rows(vars[2], &segs)?;
        let ws = tape.add(w, p)?;
        let mut h = tape.add(ws, s)?;

        let key_mask = match mask {
            Some(m) if m.iter().any(|&v| !v) => {
                let data = m.iter().map(|&v| if v { T::zero() } else { T::neg_infinity() }).collect();
                Some(tape.constant(Tensor::new(vec![n], data)?))
            }
            _ => None,
        };
        let denom = match cfg.attention_scaling {
            AttentionScaling::SqrtHeadDim => dh as f64,
            AttentionScaling::SqrtSeqLen => valid as f64,
        };
        let scale = T::lit(1.0 / denom.sqrt());
        let eps = T::lit(LAYER_NORM_EPS);

        let mut hidden = Vec::with_capacity(cfg.num_layers);
        let mut attn = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let v = &vars[3 + l * PARAMS_PER_LAYER..3 + (l + 1) * PARAMS_PER_LAYER];
            let split = |tape: &mut Tape<'a, T>, w: Var, b: Var| -> Result<Var> {
                let y = tape.linear(h, w, b)?;
                let y = tape.reshape(y, &[n, heads, dh])?;
                tape.permute(y, &[1, 0, 2])
            };
            let q = split(tape, v[0], v[1])?;
            let k = split(tape, v[2], v[3])?;
            let val = split(tape, v[4], v[5])?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(km) = key_mask {
                scores = tape.add(scores, km)?;
            }
            let a = tape.softmax(scores)?;
            let ctx = tape.matmul(a, val)?;
            let ctx = tape.permute(ctx, &[1, 0, 2])?;
            let ctx = tape.reshape(ctx, &[n, d])?;
            let out = tape.linear(ctx, v[6], v[7])?;
            let res = tape.add(h, out)?;
            let h1 = tape.layer_norm(res, v[8], v[9], eps)?;

            let inner = tape.linear(h1, v[10], v[11])?;
            let act = tape.gelu(inner);
            let outer = tape.linear(act, v[12], v[13])?;
            let res = tape.add(h1, outer)?;
            h = tape.layer_norm(res, v[14], v[15], eps)?;
            hidden.push(h);
            attn.push(a);
        }

        let cls = vars[3 + cfg.num_layers * PARAMS_PER_LAYER];
        let logits = match cfg.head {
            HeadKind::Sequence => {
                let first = tape.gather_rows(h, &[0])?;
                let z = tape.matmul(first, cls)?;
                tape.reshape(z, &[cfg.num_classes])?
            }
            HeadKind::Token => tape.matmul(h, cls)?,
        };
        Ok(Encoded { hidden, attn, logits })
    }

    /// Logits for one unpadded sequence, computed without gradients.
    pub fn logits(&self, seq: &Sequence) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let enc = self.encode(&mut tape, &vars, &seq.ids, &seq.segments, None)?;
        Ok(tape.value(enc.logits).clone())
    }

    /// Logits for many sequences.
    pub fn predict(&self, seqs: &[Sequence], exec: Execution) -> Result<Vec<Tensor<T>>> {
        exec.try_map(seqs, |s| self.logits(s))
    }

    /// Full forward over a padded batch, returning every hidden state,
    /// attention map and the logits.
    pub fn forward(&self, batch: &Batch, exec: Execution) -> Result<EncodeOutput<T>> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let idx: Vec<usize> = (0..batch.len()).collect();
        let per = exec.try_map(&idx, |&i| -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>, Tensor<T>)> {
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape, |_| false);
            let enc = self.encode(
                &mut tape,
                &vars,
                &batch.ids[i],
                &batch.segments[i],
                Some(&batch.mask[i]),
            )?;
            Ok((
                enc.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
                enc.attn.iter().map(|&v| tape.value(v).clone()).collect(),
                tape.value(enc.logits).clone(),
            ))
        })?;
        let layers = self.config.num_layers;
        let stack_layer = |pick: &dyn Fn(&(Vec<Tensor<T>>, Vec<Tensor<T>>, Tensor<T>)) -> &Tensor<T>| {
            Tensor::stack(&per.iter().map(|e| pick(e).clone()).collect::<Vec<_>>())
        };
        let mut hidden = Vec::with_capacity(layers);
        let mut attn = Vec::with_capacity(layers);
        for l in 0..layers {
            hidden.push(stack_layer(&|e| &e.0[l])?);
            attn.push(stack_layer(&|e| &e.1[l])?);
        }
        let logits = stack_layer(&|e| &e.2)?;
        Ok(EncodeOutput { hidden, attn, logits })
    }
}
