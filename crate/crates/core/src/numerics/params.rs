use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries
            .insert(name.into(), Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.entries.get_mut(name) {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Copies every same-named, same-shaped tensor from `other`; returns the names copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for (name, p) in self.entries.iter_mut() {
            if let Some(src) = other.entries.get(name) {
                if src.tensor.shape() == p.tensor.shape() {
                    p.tensor = src.tensor.clone();
                    copied.push(name.clone());
                }
            }
        }
        copied
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn ensure_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((a, pa), (b, pb)) in self.entries.iter().zip(&other.entries) {
            if a != b || pa.tensor.shape() != pb.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "incompatible parameter {a}{:?} vs {b}{:?}",
                    pa.tensor.shape(),
                    pb.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Draws from N(0, std²) truncated to ±2·std.
pub fn truncated_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        };
    }
    t
}

/// Lazily places parameters on a tape, once per name.
#[derive(Debug, Default)]
pub struct Binder {
    vars: BTreeMap<String, Var>,
    frozen: bool,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// A binder that never requests gradients (evaluation).
    pub fn frozen() -> Self {
        Binder {
            vars: BTreeMap::new(),
            frozen: true,
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let entry = store
            .entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let v = tape.leaf(
            entry
                .tensor
                .clone()
                .with_requires_grad(entry.trainable && !self.frozen),
        );
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn gradients(&self, tape: &Tape) -> Gradients {
        let mut out = Gradients::default();
        for (name, &v) in &self.vars {
            if let Some(g) = tape.grad(v) {
                out.0.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

/// Per-parameter gradient buffers keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Vec<f64>>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(buf) => {
                    if buf.len() != g.len() {
                        return dim_err(format!("gradient length mismatch for {name}"));
                    }
                    buf.iter_mut().zip(g).for_each(|(b, v)| *b += scale * v);
                }
                None => {
                    self.0
                        .insert(name.clone(), g.iter().map(|v| scale * v).collect());
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().flatten().all(|v| v.is_finite())
    }
}
