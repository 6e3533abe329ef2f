//! Named parameter storage and binding onto a tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Precision, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Uniform(f64),
}

/// Parameters keyed by dotted name. Iteration order is lexicographic, which
/// fixes the layout of checkpoints and gradient reductions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

/// FNV-1a, used to derive a per-parameter RNG stream from its name so that
/// adding a parameter never perturbs the initialisation of the others.
pub(crate) fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let (fi, fo) = match shape {
                    [a, b] => (*a, *b),
                    _ => (n, n),
                };
                let a = (6.0 / (fi + fo) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..a)).collect(),
        };
        self.map
            .insert(name.to_string(), Tensor::new(shape.to_vec(), data).unwrap());
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn round_to(&mut self, precision: Precision) {
        for t in self.map.values_mut() {
            t.round_to(precision);
        }
    }

    /// Register every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters as tape variables.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients in parameter-name order; untouched parameters get zeros.
    pub fn grads(&self, tape: &Tape, store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = tape
                    .grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.map[k].len()]);
                (k.clone(), g)
            })
            .collect()
    }
}

/// `x W + b` with `b` optional.
pub fn linear(tape: &mut Tape, p: &Bound, x: Var, prefix: &str, bias: bool) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let y = tape.matmul(x, w)?;
    if bias {
        let b = p.var(&format!("{prefix}.b"))?;
        tape.add_row(y, b)
    } else {
        Ok(y)
    }
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, bias: bool, seed: u64) {
    store.init(&format!("{prefix}.w"), &[din, dout], Init::Xavier, seed);
    if bias {
        store.init(&format!("{prefix}.b"), &[1, dout], Init::Zeros, seed);
    }
}
