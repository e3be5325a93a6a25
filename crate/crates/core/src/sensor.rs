//! Sensor physics: shot noise, electronic noise, and quantization.
//!
//! A noiseless sinogram value `y` is observed as
//!
//! ```text
//! z = Poisson(exp(s - y)) + Normal(0, sqrt(epsilon))
//! r = clamp(round(z / k), 0, 2^b - 1)
//! ```
//!
//! where `exp(s)` is the X-ray source intensity, `epsilon` the electronic
//! noise variance, `k` the quantization scale and `b` the detector bit
//! depth. Rounding is half-away-from-zero.

use crate::geom::{GeometryError, ScanGeometry, Sinogram};
use crate::math::ln_gamma;
use crate::rng::{self, Stream};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SensorError {
    #[error("epsilon must be >= 0 and finite, got {0}")]
    BadEpsilon(f64),
    #[error("k must be > 0 and finite, got {0}")]
    BadK(f64),
    #[error("bit depth must be in 1..=16, got {0}")]
    BadBitDepth(u32),
    #[error("s must be finite, got {0}")]
    BadS(f64),
    #[error("sinogram contains non-finite values")]
    NonFiniteInput,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Physical parameters of the detector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// Log source intensity: a ray attenuated by `y` hits the detector with
    /// expected photon count `exp(s - y)`.
    pub s: f64,
    /// Electronic (read-out) noise variance.
    pub epsilon: f64,
    /// Quantization scale: one output step spans `k` photons.
    pub k: f64,
    /// Bit depth; readings live in `[0, 2^b - 1]`.
    pub b: u32,
}

impl NoiseParams {
    pub fn new(s: f64, epsilon: f64, k: f64, b: u32) -> Result<Self, SensorError> {
        if !s.is_finite() {
            return Err(SensorError::BadS(s));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(SensorError::BadEpsilon(epsilon));
        }
        if !(k > 0.0) || !k.is_finite() {
            return Err(SensorError::BadK(k));
        }
        if b < 1 || b > 16 {
            return Err(SensorError::BadBitDepth(b));
        }
        Ok(NoiseParams { s, epsilon, k, b })
    }

    /// Largest representable reading, `2^b - 1`.
    pub fn r_max(&self) -> u32 {
        (1u32 << self.b) - 1
    }

    /// Expected photon count for a noiseless value `y`, with the exponent
    /// clamped to avoid overflow.
    pub fn mean_counts(&self, y: f64) -> f64 {
        (self.s - y).clamp(-700.0, 700.0).exp()
    }
}

/// Quantized detector outputs for one scan.
#[derive(Clone, Debug)]
pub struct SensorReadings {
    data: Array2<u32>,
    params: NoiseParams,
    geom: ScanGeometry,
}

impl SensorReadings {
    pub fn new(
        geom: ScanGeometry,
        params: NoiseParams,
        data: Array2<u32>,
    ) -> Result<Self, SensorError> {
        if data.dim() != geom.sino_shape() {
            return Err(GeometryError::ShapeMismatch {
                got: data.dim(),
                want: geom.sino_shape(),
            }
            .into());
        }
        let r_max = params.r_max();
        if data.iter().any(|&r| r > r_max) {
            return Err(SensorError::BadBitDepth(params.b));
        }
        Ok(SensorReadings { data, params, geom })
    }

    pub fn data(&self) -> &Array2<u32> {
        &self.data
    }

    pub fn params(&self) -> &NoiseParams {
        &self.params
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geom
    }

    /// Readings rescaled to `[0, 1]` by the maximum representable value —
    /// the network-facing view of the data.
    pub fn normalized(&self) -> Array2<f64> {
        let scale = 1.0 / self.params.r_max() as f64;
        self.data.mapv(|r| r as f64 * scale)
    }
}

/// Simulates the detector for every sinogram entry.
///
/// Entry `(a, d)` draws from substream `a * n_detectors + d` of `seed`, so
/// the result is independent of evaluation order and two entries never share
/// randomness; re-running with the same seed reproduces the readings
/// bit-for-bit.
pub fn simulate_readings(
    y: &Sinogram<f64>,
    p: &NoiseParams,
    seed: u64,
) -> Result<SensorReadings, SensorError> {
    if y.data().iter().any(|v| !v.is_finite()) {
        return Err(SensorError::NonFiniteInput);
    }
    let geom = *y.geometry();
    let n_det = geom.n_detectors();
    let sqrt_eps = p.epsilon.sqrt();
    let mut data = Array2::zeros(geom.sino_shape());
    for a in 0..geom.n_angles() {
        for d in 0..n_det {
            let mut stream = rng::substream(seed, (a * n_det + d) as u64);
            let z = draw_prequantization(p.mean_counts(y.data()[[a, d]]), sqrt_eps, &mut stream);
            data[[a, d]] = quantize(z, p.k, p.b);
        }
    }
    SensorReadings::new(geom, *p, data)
}

/// `clamp(round(z / k), 0, 2^b - 1)` with half-away-from-zero rounding.
pub fn quantize(z: f64, k: f64, b: u32) -> u32 {
    let r_max = (1u32 << b) - 1;
    let q = (z / k).round();
    if q <= 0.0 {
        0
    } else if q >= r_max as f64 {
        r_max
    } else {
        q as u32
    }
}

/// One pre-quantization sample `Poisson(lambda) + Normal(0, sqrt_eps)`.
fn draw_prequantization(lambda: f64, sqrt_eps: f64, stream: &mut Stream) -> f64 {
    let shot = sample_poisson(lambda, stream);
    if sqrt_eps > 0.0 {
        let g: f64 = stream.sample(StandardNormal);
        shot + sqrt_eps * g
    } else {
        shot
    }
}

/// Draws `n` pre-quantization values for a single noiseless value `y`; a
/// diagnostic helper for moment checks against the analytic
/// `mean = exp(s - y)` and `variance = exp(s - y) + epsilon`.
pub fn sample_prequantization(p: &NoiseParams, y: f64, n: usize, seed: u64) -> Vec<f64> {
    let lambda = p.mean_counts(y);
    let sqrt_eps = p.epsilon.sqrt();
    let mut stream = rng::root(seed);
    (0..n).map(|_| draw_prequantization(lambda, sqrt_eps, &mut stream)).collect()
}

/// Poisson sampler: multiplicative inversion below mean 10, transformed
/// rejection (PTRS) above. Returns the count as f64 — above ~1e15 counts
/// exceed integer resolution and a Gaussian limit takes over.
pub fn sample_poisson(lambda: f64, stream: &mut Stream) -> f64 {
    if lambda <= 0.0 {
        0.0
    } else if lambda < 10.0 {
        poisson_inversion(lambda, stream)
    } else if lambda < 1e15 {
        poisson_ptrs(lambda, stream)
    } else {
        let g: f64 = stream.sample(StandardNormal);
        (lambda + lambda.sqrt() * g).round().max(0.0)
    }
}

fn poisson_inversion(lambda: f64, stream: &mut Stream) -> f64 {
    let limit = (-lambda).exp();
    let mut k = 0.0;
    let mut prod: f64 = stream.random();
    while prod > limit {
        k += 1.0;
        prod *= stream.random::<f64>();
    }
    k
}

/// Hörmann's PTRS transformed-rejection sampler, valid for lambda >= 10.
fn poisson_ptrs(lambda: f64, stream: &mut Stream) -> f64 {
    let log_lambda = lambda.ln();
    let b = 0.931 + 2.53 * lambda.sqrt();
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = stream.random::<f64>() - 0.5;
        let v: f64 = stream.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let accept_bound = k * log_lambda - lambda - ln_gamma(k + 1.0);
        if (v * inv_alpha / (a / (us * us) + b)).ln() <= accept_bound {
            return k;
        }
    }
}
