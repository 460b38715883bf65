use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// A named, trainable tensor.
///
/// `frozen` pins the parameter: optimizers skip it regardless of what a
/// training stage asks for.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> PartialEq for ParamSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Append a parameter; names must be unique. Returns its position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            frozen: false,
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.position(name).map(move |i| &mut self.params[i])
    }

    pub fn at(&self, i: usize) -> &Parameter<T> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Parameter<T> {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Register every parameter as a borrowed leaf. A parameter requires a
    /// gradient when it is not frozen and `trainable` accepts its name.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: impl Fn(&str) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.param(&p.tensor, !p.frozen && trainable(&p.name)))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// parameters, hex encoded.
    pub fn hash_where(&self, keep: impl Fn(&str) -> bool) -> String {
        hash_tensors(
            self.params
                .iter()
                .filter(|p| keep(&p.name))
                .map(|p| (p.name.as_str(), &p.tensor)),
        )
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    /// Per-parameter hashes, in order.
    pub fn hashes(&self) -> Vec<(String, String)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), hash_tensors(std::iter::once((p.name.as_str(), &p.tensor)))))
            .collect()
    }
}

pub fn hash_tensors<'t, T: Real>(items: impl Iterator<Item = (&'t str, &'t Tensor<T>)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.as_f64().to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradient buffers aligned with a [`ParamSet`]; `None` for parameters that
/// did not require a gradient.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn empty(n: usize) -> Self {
        ParamGrads { grads: vec![None; n] }
    }

    /// Collect leaf gradients for the bound parameter vars.
    pub fn from_tape(grads: &mut super::Gradients<T>, vars: &[Var]) -> Self {
        ParamGrads {
            grads: vars.iter().map(|&v| grads.take(v)).collect(),
        }
    }

    /// `self += other * weight`, element by element in a fixed order.
    pub fn add_scaled(&mut self, other: &ParamGrads<T>, weight: T) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                let d = dst.get_or_insert_with(|| vec![T::zero(); src.len()]);
                for (a, &b) in d.iter_mut().zip(src) {
                    *a += b * weight;
                }
            }
        }
    }

    /// L2 norm over every present buffer.
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
