//! Spectral normalization by power iteration with a persistent left vector.
//!
//! A weight viewed as a matrix (output channels by everything else) is
//! divided on the tape by an estimate of its largest singular value. The
//! left vector warm-starts from the previous call through `ParamStore::aux`,
//! so the estimate tightens over training steps at five iterations per call.

use crate::graph::{Graph, Var};
use crate::store::ParamStore;
use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand_distr::StandardNormal;
use tomoforge_core::rng::{phase_seed, root};
use tomoforge_core::Real;

pub const POWER_ITERATIONS: usize = 5;

/// Divides `w` by its estimated top singular value. Returns the normalized
/// weight and the sigma node (rank 0) so callers can audit layer norms.
///
/// The gradient treats the singular vectors as constants, which is the exact
/// derivative of sigma at the converged pair.
pub fn spectral_normalize<T: Real>(
    graph: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    w: Var,
) -> (Var, Var) {
    let shape: Vec<usize> = graph.value(w).shape().to_vec();
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let wmat = {
        let flat: Vec<T> = graph.value(w).iter().cloned().collect();
        Array2::from_shape_vec((rows, cols), flat).expect("contiguous weight")
    };

    let key = format!("sn/u/{name}");
    let mut u: Array1<T> = match store.aux.get(&key) {
        Some(stored) => Array1::from_iter(stored.iter().cloned()),
        None => {
            let mut rng = root(phase_seed(store.seed(), &key));
            Array1::from_shape_fn(rows, |_| {
                T::from_f64(rng.sample::<f64, _>(StandardNormal))
            })
        }
    };
    normalize(&mut u);
    let mut v = Array1::<T>::zeros(cols);
    for _ in 0..POWER_ITERATIONS {
        v = wmat.t().dot(&u);
        normalize(&mut v);
        u = wmat.dot(&v);
        normalize(&mut u);
    }
    store.aux.insert(key, u.clone().into_dyn());

    // sigma = u^T W v as a tape node: an inner product of w with the
    // rank-one outer product laid out in the weight's own shape.
    let mut outer = Array2::<T>::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            outer[[i, j]] = u[i] * v[j];
        }
    }
    let outer: ArrayD<T> = outer
        .into_shape_with_order(ndarray::IxDyn(&shape))
        .expect("outer product reshape");
    let sigma = graph.dot_const(w, outer);
    let w_sn = graph.div_by_scalar_var(w, sigma);
    (w_sn, sigma)
}

fn normalize<T: Real>(x: &mut Array1<T>) {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let denom = norm + T::from_f64(1e-12);
    x.mapv_inplace(|v| v / denom);
}
