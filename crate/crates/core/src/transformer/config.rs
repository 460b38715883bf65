use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Divisor applied to attention scores before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScaling {
    /// `sqrt(hidden_dim / num_heads)`.
    #[default]
    SqrtHeadDim,
    /// `sqrt(n)` with `n` the number of non-padding tokens.
    SqrtSeqLen,
}

/// What the classifier reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One label per sequence, read from the `[CLS]` position.
    #[default]
    Sequence,
    /// One label per token position.
    Token,
}

/// Architecture hyperparameters of an encoder plus its classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub attention_scaling: AttentionScaling,
    #[serde(default)]
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim < 2 {
            return Err(Error::Config("hidden_dim must be at least 2 for layer norm".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Parameter names and shapes in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.hidden_dim, self.ff_dim);
        let mut out = vec![
            (names::WORD.to_string(), vec![self.vocab_size, d]),
            (names::POSITION.to_string(), vec![self.max_seq_len, d]),
            (names::SEGMENT.to_string(), vec![2, d]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("encoder.{l}.{s}");
            for proj in ["query", "key", "value", "output"] {
                out.push((p(&format!("attention.{proj}.weight")), vec![d, d]));
                out.push((p(&format!("attention.{proj}.bias")), vec![d]));
            }
            out.push((p("attention.norm.gain"), vec![d]));
            out.push((p("attention.norm.bias"), vec![d]));
            out.push((p("ffn.inner.weight"), vec![d, f]));
            out.push((p("ffn.inner.bias"), vec![f]));
            out.push((p("ffn.outer.weight"), vec![f, d]));
            out.push((p("ffn.outer.bias"), vec![d]));
            out.push((p("ffn.norm.gain"), vec![d]));
            out.push((p("ffn.norm.bias"), vec![d]));
        }
        out.push((names::CLASSIFIER.to_string(), vec![d, self.num_classes]));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Well-known parameter names and name predicates.
pub mod names {
    pub const WORD: &str = "embeddings.word";
    pub const POSITION: &str = "embeddings.position";
    pub const SEGMENT: &str = "embeddings.segment";
    pub const CLASSIFIER: &str = "classifier.weight";

    /// Task-specific head parameters.
    pub fn is_classifier(name: &str) -> bool {
        name.starts_with("classifier.")
    }

    /// Everything that is not the task head: embeddings and blocks.
    pub fn is_encoder(name: &str) -> bool {
        !is_classifier(name)
    }

    pub fn is_block(name: &str) -> bool {
        name.starts_with("encoder.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            max_seq_len: 10,
            vocab_size: 12,
            num_classes: 3,
            attention_scaling: AttentionScaling::SqrtHeadDim,
            head: HeadKind::Sequence,
        }
    }

    #[test]
    fn validates_divisibility() {
        let mut c = tiny();
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn names_are_unique() {
        let shapes = tiny().parameter_shapes();
        let mut names: Vec<_> = shapes.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), shapes.len());
    }

    #[test]
    fn toml_round_trip_rejects_unknown_keys() {
        let c = tiny();
        let text = toml::to_string(&c).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        let bad = format!("{text}\nbogus = 1\n");
        assert!(toml::from_str::<ModelConfig>(&bad).is_err());
    }
}
