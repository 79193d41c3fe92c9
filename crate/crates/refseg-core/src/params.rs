//! Named parameter storage and per-graph parameter binding.
//!
//! All learnable state lives in a [`ParamStore`] keyed by dotted names
//! (`step1.visual.conv0.weight`). Model structs hold architecture metadata
//! plus name prefixes; each forward pass binds the needed parameters into
//! the graph through a [`ParamVars`] cache so a parameter used several times
//! maps to a single graph leaf and its gradient accumulates correctly.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};

/// Ordered name -> tensor map for all learnable state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn scalar(&self, name: &str) -> f64 {
        let a = self.get(name);
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().expect("scalar parameter")
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) {
        let a = self.get_mut(name);
        debug_assert_eq!(a.len(), 1);
        *a.iter_mut().next().expect("scalar parameter") = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }
}

/// Per-graph binding of store parameters to graph leaves.
#[derive(Default)]
pub struct ParamVars {
    bound: BTreeMap<(String, bool), Var>,
}

impl ParamVars {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind `name` into the graph, reusing the existing leaf on repeat use.
    /// `trainable = false` binds a constant (no gradient tracked).
    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, name: &str, trainable: bool) -> Var {
        if let Some(v) = self.bound.get(&(name.to_string(), trainable)) {
            return *v;
        }
        let value = store.get(name).clone();
        let var = if trainable {
            g.input(value)
        } else {
            g.constant(value)
        };
        self.bound.insert((name.to_string(), trainable), var);
        var
    }

    /// Trainable bindings as (name, var), sorted by name.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound
            .iter()
            .filter(|((_, t), _)| *t)
            .map(|((n, _), v)| (n.as_str(), *v))
    }
}

/// Deterministic RNG derived from a master seed and a purpose tag.
pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Scaled-uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("init shape")
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn scalar_param(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[1]), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_reuses_leaf_and_accumulates_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut g = Graph::new();
        let mut pv = ParamVars::new();
        let a = pv.bind(&mut g, &store, "w", true);
        let b = pv.bind(&mut g, &store, "w", true);
        assert_eq!(a, b);
        let prod = g.mul(a, b); // w^2
        let s = g.sum_all(prod);
        let grads = g.backward(s);
        // d(w^2)/dw = 2w = 6
        let dw = grads.wrt(a).unwrap();
        assert_eq!(dw[IxDyn(&[0])], 6.0);
    }

    #[test]
    fn rng_streams_are_independent_and_reproducible() {
        let mut a1 = rng_for(7, "alpha");
        let mut a2 = rng_for(7, "alpha");
        let mut b = rng_for(7, "beta");
        let x1: f64 = a1.gen();
        let x2: f64 = a2.gen();
        let y: f64 = b.gen();
        assert_eq!(x1, x2);
        assert_ne!(x1, y);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = rng_for(0, "init");
        let w = init_uniform(&mut rng, &[16, 4], 4);
        for &v in w.iter() {
            assert!(v.abs() <= 0.5);
        }
    }
}
