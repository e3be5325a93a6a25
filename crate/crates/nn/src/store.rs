//! Named parameter storage shared across training steps.
//!
//! Networks are described purely by the names and shapes they request during
//! a forward pass: the first pass materializes each tensor with a
//! deterministic per-name initializer, later passes bind the stored values
//! onto a fresh tape. The same traversal therefore serves initialization,
//! training and inference, and checkpoints are just the map contents.

use crate::graph::{Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use tomoforge_core::rng::{phase_seed, root};
use tomoforge_core::Real;

/// How a parameter is filled the first time it is requested.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Kaiming normal: std = sqrt(2 / fan_in).
    He { fan_in: usize },
    Zeros,
    Const(f64),
    /// Standard normal scaled by a fixed factor.
    Normal { std: f64 },
}

pub struct ParamStore<T: Real> {
    pub values: BTreeMap<String, ArrayD<T>>,
    /// Non-trainable state saved alongside parameters (power-iteration
    /// vectors and similar).
    pub aux: BTreeMap<String, ArrayD<T>>,
    seed: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore { values: BTreeMap::new(), aux: BTreeMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    /// The stored array for `name`, creating it with `init` if absent.
    /// Initialization depends only on (store seed, name), never on request
    /// order.
    pub fn materialize(&mut self, name: &str, shape: &[usize], init: Init) -> &ArrayD<T> {
        if !self.values.contains_key(name) {
            let mut rng = root(phase_seed(self.seed, name));
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::He { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
                        .collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Const(c) => vec![T::from_f64(c); n],
                Init::Normal { std } => (0..n)
                    .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
                    .collect(),
            };
            let arr = ArrayD::from_shape_vec(IxDyn(shape), data).expect("init shape");
            self.values.insert(name.to_string(), arr);
        }
        let got = &self.values[name];
        assert_eq!(got.shape(), shape, "parameter {name} requested with a new shape");
        got
    }

    /// Binds (and if needed creates) a parameter onto the tape. Frozen
    /// bindings place the value as a constant instead: gradients still flow
    /// through the layer's activations, but none are computed for the
    /// parameters themselves and nothing is collected.
    pub fn var(
        &mut self,
        graph: &mut Graph<T>,
        bind: &mut Bindings,
        name: &str,
        shape: &[usize],
        init: Init,
    ) -> Var {
        let value = self.materialize(name, shape, init).clone();
        if bind.frozen {
            return graph.input(value);
        }
        let v = graph.param(value);
        bind.pairs.push((name.to_string(), v));
        v
    }

    /// Overwrites a stored parameter (optimizer updates).
    pub fn set(&mut self, name: &str, value: ArrayD<T>) {
        self.values.insert(name.to_string(), value);
    }
}

/// Parameter-name-to-tape-node map for one forward pass.
#[derive(Default)]
pub struct Bindings {
    pairs: Vec<(String, Var)>,
    frozen: bool,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings::default()
    }

    /// Bindings for a network treated as fixed this pass: parameters enter
    /// the tape as constants, so backward skips their whole subgraph. Used
    /// for the critic inside generator steps and vice versa.
    pub fn frozen() -> Self {
        Bindings { pairs: Vec::new(), frozen: true }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.pairs.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn var_of(&self, name: &str) -> Option<Var> {
        self.pairs.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Collects gradients after a backward pass, keyed by parameter name.
    /// Parameters bound more than once have their gradients summed by the
    /// tape already; duplicated bindings are rejected to keep that honest.
    pub fn grads<T: Real>(&self, graph: &Graph<T>) -> BTreeMap<String, ArrayD<T>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.pairs {
            if let Some(g) = graph.grad(*var) {
                let prev = out.insert(name.clone(), g.clone());
                assert!(prev.is_none(), "parameter {name} bound twice in one pass");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_is_order_independent() {
        let mut a = ParamStore::<f64>::new(7);
        let mut b = ParamStore::<f64>::new(7);
        let fan = Init::He { fan_in: 9 };
        a.materialize("w1", &[4, 3], fan);
        a.materialize("w2", &[2, 2], fan);
        b.materialize("w2", &[2, 2], fan);
        b.materialize("w1", &[4, 3], fan);
        assert_eq!(a.values["w1"], b.values["w1"]);
        assert_eq!(a.values["w2"], b.values["w2"]);
        // Different names, different draws.
        assert_ne!(
            a.values["w1"].as_slice().unwrap()[0],
            a.values["w2"].as_slice().unwrap()[0]
        );
    }

    #[test]
    fn he_scale_tracks_fan_in() {
        let mut s = ParamStore::<f64>::new(1);
        s.materialize("big", &[64, 256], Init::He { fan_in: 256 });
        let w = &s.values["big"];
        let var: f64 = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let want = 2.0 / 256.0;
        assert!((var / want - 1.0).abs() < 0.1, "sample variance {var} vs {want}");
    }

    #[test]
    fn grads_round_trip_through_bindings() {
        let mut store = ParamStore::<f64>::new(3);
        let mut g = Graph::checked();
        let mut bind = Bindings::new();
        let w = store.var(&mut g, &mut bind, "w", &[3], Init::Const(2.0));
        let sq = g.mul(w, w);
        let loss = g.sum(sq);
        g.backward(loss);
        let grads = bind.grads(&g);
        assert_eq!(grads.len(), 1);
        assert!(grads["w"].iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn frozen_bindings_register_nothing_but_share_values() {
        let mut store = ParamStore::<f64>::new(3);
        let mut g = Graph::new();
        let mut live = Bindings::new();
        let w = store.var(&mut g, &mut live, "w", &[3], Init::Const(2.0));

        let mut frozen = Bindings::frozen();
        let w_f = store.var(&mut g, &mut frozen, "w", &[3], Init::Const(2.0));
        assert_eq!(g.value(w), g.value(w_f), "frozen reads the same stored values");

        let prod = g.mul(w, w_f);
        let loss = g.sum(prod);
        g.backward(loss);
        assert!(frozen.is_frozen());
        assert!(frozen.grads(&g).is_empty(), "frozen parameters never bind");
        // d(sum(w * w_f))/dw = w_f with w_f held constant.
        assert!(bind_grad(&live, &g).iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    fn bind_grad(bind: &Bindings, g: &Graph<f64>) -> ndarray::ArrayD<f64> {
        bind.grads(g)["w"].clone()
    }
}
