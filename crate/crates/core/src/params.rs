//! Named parameter storage.
//!
//! Each parameter tensor is initialized from its own RNG stream derived from
//! `(seed, name)`, so adding or removing one parameter group never shifts the
//! initial values of another.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stable 64-bit FNV-1a, used to derive per-name RNG streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    Normal(f64),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Default::default() }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let mut rng = named_rng(self.seed, name);
        let t = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Const(c) => Tensor::full(rows, cols, c),
            Init::Glorot => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
            }
            Init::Normal(std) => Tensor::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); std * z }).collect(),
            ),
        };
        self.add_tensor(name, t)
    }

    pub fn add_tensor(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
    }

    /// Parameter ids whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.ids().filter(|id| self.names[id.0].starts_with(prefix)).collect()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_group(&mut self, prefix: &str) {
        for id in self.group(prefix) {
            self.tensors[id.0].data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn random_like(&self, rng: &mut impl Rng) -> Vec<Tensor> {
        self.tensors
            .iter()
            .map(|t| Tensor::from_vec(t.rows(), t.cols(), (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_name_streams_are_independent_of_order() {
        let mut a = ParamStore::new(3);
        a.add("x", 2, 2, Init::Glorot);
        let ya = a.add("y", 3, 1, Init::Normal(1.0));
        let mut b = ParamStore::new(3);
        let yb = b.add("y", 3, 1, Init::Normal(1.0));
        assert_eq!(a.get(ya), b.get(yb));
    }

    #[test]
    fn group_by_prefix() {
        let mut s = ParamStore::new(0);
        s.add("dec.l0.w", 1, 1, Init::Const(1.0));
        s.add("dec.l1.w", 1, 1, Init::Const(1.0));
        s.add("enc.w", 1, 1, Init::Const(1.0));
        assert_eq!(s.group("dec.").len(), 2);
        s.zero_group("dec.");
        assert_eq!(s.get(s.id("dec.l1.w").unwrap()).item(), 0.0);
        assert_eq!(s.get(s.id("enc.w").unwrap()).item(), 1.0);
    }
}
