use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors in insertion order.
///
/// Iteration order is the order in which a model registers its parameters,
/// which is fixed per architecture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Place a parameter on `tape` as a trainable leaf.
    pub fn leaf(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        Ok(tape.param(name, t.clone()))
    }

    pub fn as_inputs(&self) -> HashMap<String, Tensor> {
        self.entries.iter().cloned().collect()
    }

    /// Zero-mean normal entries with the given standard deviation.
    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
        let mut t = Tensor::zeros(rows, cols);
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in t.data_mut() {
                *v = dist.sample(rng);
            }
        }
        t
    }

    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        let dist = Uniform::new(lo, hi).expect("lo < hi");
        let mut t = Tensor::zeros(rows, cols);
        for v in t.data_mut() {
            *v = dist.sample(rng);
        }
        t
    }

    /// JSON checkpoint: an ordered list of `{name, shape, values}`.
    pub fn write_json(&self, w: impl Write) -> Result<()> {
        let entries: Vec<CheckpointEntry> = self
            .entries
            .iter()
            .map(|(n, t)| CheckpointEntry {
                name: n.clone(),
                shape: t.shape(),
                values: t.data().to_vec(),
            })
            .collect();
        serde_json::to_writer(w, &entries)?;
        Ok(())
    }

    pub fn read_json(r: impl Read) -> Result<Self> {
        let entries: Vec<CheckpointEntry> = serde_json::from_reader(r)?;
        let mut store = Self::new();
        for e in entries {
            store.insert(e.name, Tensor::new(e.shape[0], e.shape[1], e.values)?)?;
        }
        Ok(store)
    }
}
