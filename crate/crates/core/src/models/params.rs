use rand::Rng;
use seqbench_tensor::{Tape, Tensor, Var};

use crate::seeding::Stream;

/// Named parameter tensors in a fixed order. Tables flagged `pad_row` keep
/// row 0 at zero and do not count it as trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    pad_row: Vec<bool>,
}

impl ParamStore {
    pub(crate) fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            pad_row: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, tensor: Tensor, pad_row: bool) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.pad_row.push(pad_row);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn has_pad_row(&self, i: usize) -> bool {
        self.pad_row[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Trainable scalars, frozen pad rows excluded.
    pub fn count(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.pad_row)
            .map(|(t, &p)| t.numel() - if p { t.cols() } else { 0 })
            .sum()
    }

    /// Places every tensor on the tape, tracked when `train` is set.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if train { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

pub(crate) fn uniform(rng: &mut Stream, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Xavier-uniform with explicit fans, so stacked gate blocks use the fans of
/// one block.
pub(crate) fn xavier(rng: &mut Stream, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Item or position table with `uniform(-0.5/d, 0.5/d)` entries and a zero
/// row 0.
pub(crate) fn table(rng: &mut Stream, rows: usize, d: usize) -> Tensor {
    let mut t = uniform(rng, &[rows, d], 0.5 / d as f64);
    t.data_mut()[..d].iter_mut().for_each(|x| *x = 0.0);
    t
}
