//! Named parameter storage, initialization, and the SGD optimizer.
//!
//! Parameters live outside the tape; each training step binds them as leaf
//! nodes, runs backward, and pulls the leaf gradients back out by name.
//! All iteration is in `BTreeMap` order, so gradient accumulation and
//! updates have one documented, reproducible reduction order.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::rng::gauss;
use crate::tape::{NodeId, Tape, Tensor};

/// Named dense parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.map.insert(name.to_string(), tensor);
    }

    pub fn gaussian(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) {
        let data = (0..rows * cols).map(|_| std * gauss(rng)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data));
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Tensor::from_vec(rows, cols, vec![value; rows * cols]));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|t| t.data.len()).sum()
    }

    /// Binds every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.map {
            ids.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        Bound { ids }
    }
}

/// Tape leaf ids for one bound snapshot.
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    /// Accumulates leaf gradients into `grads`, scaled by `scale`.
    /// Iteration is name-ordered.
    pub fn accumulate_grads(&self, tape: &Tape, grads: &mut GradStore, scale: f64) {
        for (name, id) in &self.ids {
            if let Some(g) = tape.grad(*id) {
                let slot = grads
                    .map
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(g.rows, g.cols));
                for (s, v) in slot.data.iter_mut().zip(g.data.iter()) {
                    *s += scale * v;
                }
            }
        }
    }
}

/// Accumulated gradients keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    map: BTreeMap<String, Tensor>,
}

impl GradStore {
    pub fn new() -> GradStore {
        GradStore { map: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }
}

/// Plain stochastic gradient descent with optional momentum and an optional
/// global-norm gradient clip (a stability guard, not an adaptive method).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip: Option<f64>,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Sgd {
        Sgd { lr, momentum, clip: Some(1.0), velocity: BTreeMap::new() }
    }

    pub fn with_clip(lr: f64, momentum: f64, clip: Option<f64>) -> Sgd {
        Sgd { lr, momentum, clip, velocity: BTreeMap::new() }
    }

    /// Applies one update in name order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) {
        let scale = match self.clip {
            Some(max_norm) => {
                let sq: f64 = grads
                    .map
                    .values()
                    .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, g) in &grads.map {
            let p = params.get_mut(name);
            if self.momentum > 0.0 {
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(g.rows, g.cols));
                for i in 0..p.data.len() {
                    v.data[i] = self.momentum * v.data[i] + scale * g.data[i];
                    p.data[i] -= self.lr * v.data[i];
                }
            } else {
                for i in 0..p.data.len() {
                    p.data[i] -= self.lr * scale * g.data[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Sgd::new(0.1, 0.0);
        for _ in 0..100 {
            let mut grads = GradStore::new();
            let x = params.get("x").clone();
            grads.map.insert(
                "x".into(),
                Tensor::from_vec(1, 2, vec![2.0 * x.data[0], 2.0 * x.data[1]]),
            );
            opt.step(&mut params, &grads);
        }
        assert!(params.get("x").data.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn bind_and_accumulate_round_trip() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let w = bound.id("w");
        let loss = tape.squared_error_sum(w, &Tensor::zeros(2, 2));
        tape.backward(loss);
        let mut grads = GradStore::new();
        bound.accumulate_grads(&tape, &mut grads, 0.5);
        let g = grads.get("w").unwrap();
        assert_eq!(g.data, vec![1.0, 2.0, 3.0, 4.0]); // 0.5 * 2x
    }
}
