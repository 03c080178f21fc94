//! Named parameter tensors shared by every model component.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Storage precision for parameter values. In `F32` mode every value is kept
/// exactly representable as an `f32`, so 32-bit checkpoints are lossless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn round(self, m: &mut Mat) {
        if self == Precision::F32 {
            m.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Mat,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialised weight.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        trainable: bool,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = Mat::from_shape_fn(shape, |_| rng.random_range(-bound..bound));
        self.add(name, value, trainable)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: (usize, usize), trainable: bool) -> ParamId {
        self.add(name, Mat::zeros(shape), trainable)
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: (usize, usize), trainable: bool) -> ParamId {
        self.add(name, Mat::ones(shape), trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.is_trainable(*id))
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(self.entries[id.0].value.dim(), value.dim(), "set: shape of {}", self.entries[id.0].name);
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn round_to(&mut self, precision: Precision) {
        for e in &mut self.entries {
            precision.round(&mut e.value);
        }
    }

    /// Euclidean distance between two stores with identical layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        assert_eq!(self.len(), other.len(), "distance: layouts differ");
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (&a.value - &b.value).mapv(|v| v * v).sum())
            .sum::<f64>()
            .sqrt()
    }
}
