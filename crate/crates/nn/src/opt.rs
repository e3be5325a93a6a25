//! Adam with bias correction, and the warmup/step-decay learning-rate
//! schedule used by the long training runs.

use ndarray::ArrayD;
use std::collections::BTreeMap;
use tomoforge_core::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates per parameter, keyed by parameter name
/// so checkpoints can serialize them deterministically.
pub struct AdamState<T: Real> {
    pub m: BTreeMap<String, ArrayD<T>>,
    pub v: BTreeMap<String, ArrayD<T>>,
    /// Number of `step` calls applied so far (bias-correction time).
    pub t: u64,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        AdamState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    /// One Adam update over every (name, gradient) pair. Parameters without
    /// a gradient this step keep their moments untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, ArrayD<T>>,
        grads: &BTreeMap<String, ArrayD<T>>,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let eps = T::from_f64(ADAM_EPS);
        let corr1 = T::from_f64(1.0 - ADAM_BETA1.powi(self.t as i32));
        let corr2 = T::from_f64(1.0 - ADAM_BETA2.powi(self.t as i32));
        let lr_t = T::from_f64(lr);
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / corr1;
                let vhat = *v / corr2;
                *p = *p - lr_t * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// Learning rate at a given batch index: exponential warmup to 3e-4 over the
/// first 5000 batches, then halving every 80000 batches.
pub fn lr_at(batch: u64) -> f64 {
    const PEAK: f64 = 3e-4;
    if batch < 5000 {
        let x = batch as f64 / 5000.0;
        PEAK * ((5.0 * x).exp() - 1.0) / (5.0f64.exp() - 1.0)
    } else {
        PEAK * 0.5f64.powi(((batch - 5000) / 80000) as i32)
    }
}
