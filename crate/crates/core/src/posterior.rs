//! Brute-force Bayesian posterior over noiseless sinogram values.
//!
//! Given a quantized reading `r`, this module integrates the exact sensor
//! likelihood over a uniform prior on a y-grid and reports the posterior
//! mean and standard deviation per pixel. It is deliberately slow and
//! direct — a ground-truth oracle the learned posterior networks are
//! measured against, and the source of the `mu(r)`, `sigma(r)` fields used
//! by the weighted losses.

use crate::geom::Sinogram;
use crate::math::{ln_gamma, normal_cdf};
use crate::sensor::{quantize, NoiseParams, SensorReadings};
use ndarray::Array2;
use std::collections::HashMap;
use thiserror::Error;

/// Lower bound applied to every posterior standard deviation; the weighted
/// norms divide by sigma and are otherwise singular.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Posterior mass allowed at the two grid endpoints before a computation is
/// flagged as grid-too-narrow.
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-6;

#[derive(Error, Debug)]
pub enum PosteriorError {
    #[error("y grid needs finite min < max and step > 0 (got [{min}, {max}] step {step})")]
    BadGrid { min: f64, max: f64, step: f64 },
    #[error("eager posterior table for b={0} would hold 2^{0} entries; use the lazy grid oracle")]
    TableTooLarge(u32),
    #[error("readings were simulated under different noise parameters")]
    ParamsMismatch,
}

/// Uniform grid of candidate noiseless values: `min, min+step, ..., <= max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl YGrid {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self, PosteriorError> {
        if !(min.is_finite() && max.is_finite() && step > 0.0 && step.is_finite() && max > min) {
            return Err(PosteriorError::BadGrid { min, max, step });
        }
        Ok(YGrid { min, max, step })
    }

    /// Default grid for the given sensor: wide enough that every
    /// representable reading maps to photon counts inside it, from
    /// saturation (`k * 2^b` expected photons) to essentially dark.
    pub fn for_params(p: &NoiseParams) -> YGrid {
        let min = p.s - (p.k * (1u64 << p.b) as f64).ln() - 1.0;
        let max = p.s + 5.0;
        YGrid { min, max, step: 0.005 }
    }

    pub fn len(&self) -> usize {
        ((self.max - self.min) / self.step).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, idx: usize) -> f64 {
        self.min + idx as f64 * self.step
    }
}

/// Posterior summary for one reading value, with diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct PixelPosterior {
    pub mu: f64,
    pub sigma: f64,
    /// Fraction of posterior mass sitting on the two outermost grid points;
    /// values above [`BOUNDARY_MASS_LIMIT`] mean the grid truncates the
    /// posterior. Saturating readings (0 and `2^b - 1`) flag this
    /// inherently: their likelihood stays positive as `y` leaves the grid,
    /// so the prior boundary is part of their definition.
    pub boundary_mass: f64,
}

/// Likelihood `P(r | y)` of reading `r` given noiseless value `y`: Poisson
/// terms (window covering mass `1 - 1e-10`) times the Gaussian probability
/// of landing in the quantization cell of `r`, with the clamp bins absorbing
/// the tails.
pub fn likelihood(r: u32, p: &NoiseParams, y: f64) -> f64 {
    let lambda = p.mean_counts(y);
    let r_max = p.r_max();
    let sd = lambda.sqrt();
    let pois_lo = (lambda - 9.0 * sd - 30.0).floor().max(0.0);
    let pois_hi = (lambda + 9.0 * sd + 30.0).ceil();

    let sqrt_eps = p.epsilon.sqrt();
    let pad = 8.0 * sqrt_eps + 1.0;
    let cell_lo = p.k * (r as f64 - 0.5);
    let cell_hi = p.k * (r as f64 + 0.5);

    // Entire Poisson window deep inside an absorbing cell: probability one.
    if r == 0 && pois_hi <= cell_hi - pad {
        return 1.0;
    }
    if r == r_max && pois_lo >= cell_lo + pad {
        return 1.0;
    }

    // Restrict to counts whose quantization cell overlap is non-negligible.
    let n_lo = if r == 0 { pois_lo } else { pois_lo.max((cell_lo - pad).floor()).max(0.0) };
    let n_hi = if r == r_max { pois_hi } else { pois_hi.min((cell_hi + pad).ceil()) };
    if n_hi < n_lo {
        return 0.0;
    }

    let log_lambda = lambda.ln();
    let mut acc = 0.0;
    let mut n = n_lo;
    while n <= n_hi {
        let pois = (n * log_lambda - lambda - ln_gamma(n + 1.0)).exp();
        let w = if p.epsilon == 0.0 {
            if quantize(n, p.k, p.b) == r {
                1.0
            } else {
                0.0
            }
        } else if r == 0 {
            normal_cdf((cell_hi - n) / sqrt_eps)
        } else if r == r_max {
            1.0 - normal_cdf((cell_lo - n) / sqrt_eps)
        } else {
            normal_cdf((cell_hi - n) / sqrt_eps) - normal_cdf((cell_lo - n) / sqrt_eps)
        };
        acc += pois * w;
        n += 1.0;
    }
    acc
}

/// Posterior mean and standard deviation of `y` given reading `r`, under a
/// uniform prior on `grid`, with boundary-mass diagnostics.
pub fn posterior_pixel_detailed(r: u32, p: &NoiseParams, grid: &YGrid) -> PixelPosterior {
    let n = grid.len();
    let mut w = Vec::with_capacity(n);
    let mut total = 0.0;
    for idx in 0..n {
        let l = likelihood(r, p, grid.point(idx));
        total += l;
        w.push(l);
    }
    if total <= 0.0 {
        // The reading is impossible everywhere on the grid; fall back to the
        // prior itself so callers get finite numbers plus a loud flag.
        let mu = 0.5 * (grid.min + grid.point(n - 1));
        let sigma = ((grid.point(n - 1) - grid.min).powi(2) / 12.0).sqrt().max(SIGMA_FLOOR);
        return PixelPosterior { mu, sigma, boundary_mass: 1.0 };
    }
    let mut mean = 0.0;
    for (idx, wi) in w.iter().enumerate() {
        mean += wi * grid.point(idx);
    }
    mean /= total;
    let mut var = 0.0;
    for (idx, wi) in w.iter().enumerate() {
        let d = grid.point(idx) - mean;
        var += wi * d * d;
    }
    var /= total;
    PixelPosterior {
        mu: mean,
        sigma: var.sqrt().max(SIGMA_FLOOR),
        boundary_mass: (w[0] + w[n - 1]) / total,
    }
}

/// Posterior mean and standard deviation for one reading value. Logs a
/// warning when the grid truncates the posterior.
pub fn posterior_oracle_pixel(r: u32, p: &NoiseParams, grid: &YGrid) -> (f64, f64) {
    let post = posterior_pixel_detailed(r, p, grid);
    if post.boundary_mass > BOUNDARY_MASS_LIMIT {
        log::warn!(
            "posterior grid [{}, {}] too narrow for r={r}: boundary mass {:.2e}",
            grid.min,
            grid.max,
            post.boundary_mass
        );
    }
    (post.mu, post.sigma)
}

/// Per-pixel posterior summaries with sinogram shape.
#[derive(Clone, Debug)]
pub struct PosteriorGrid {
    mu: Sinogram<f64>,
    sigma: Sinogram<f64>,
}

impl PosteriorGrid {
    /// Wraps precomputed fields, enforcing matching shapes and the sigma
    /// floor.
    pub fn new(mu: Sinogram<f64>, sigma: Sinogram<f64>) -> Result<Self, PosteriorError> {
        if mu.geometry() != sigma.geometry() {
            return Err(PosteriorError::ParamsMismatch);
        }
        let geom = *sigma.geometry();
        let floored = sigma.into_data().mapv(|s| s.max(SIGMA_FLOOR));
        Ok(PosteriorGrid {
            mu,
            sigma: Sinogram::new(geom, floored).expect("shape preserved"),
        })
    }

    pub fn mu(&self) -> &Sinogram<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &Sinogram<f64> {
        &self.sigma
    }
}

/// Eagerly computed posterior lookup for every representable reading value
/// under fixed parameters and grid. Build once, then summarize any number of
/// reading matrices in O(1) per entry.
#[derive(Clone, Debug)]
pub struct PosteriorTable {
    params: NoiseParams,
    grid: YGrid,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    flagged: usize,
}

impl PosteriorTable {
    pub fn new(params: NoiseParams, grid: YGrid) -> Result<Self, PosteriorError> {
        if params.b > 12 {
            return Err(PosteriorError::TableTooLarge(params.b));
        }
        let count = params.r_max() as usize + 1;
        let mut mu = Vec::with_capacity(count);
        let mut sigma = Vec::with_capacity(count);
        let mut flagged = 0;
        for r in 0..count {
            let post = posterior_pixel_detailed(r as u32, &params, &grid);
            if post.boundary_mass > BOUNDARY_MASS_LIMIT {
                flagged += 1;
            }
            mu.push(post.mu);
            sigma.push(post.sigma);
        }
        if flagged > 0 {
            log::debug!("posterior table: {flagged}/{count} reading values lean on the prior boundary");
        }
        Ok(PosteriorTable { params, grid, mu, sigma, flagged })
    }

    pub fn with_default_grid(params: NoiseParams) -> Result<Self, PosteriorError> {
        Self::new(params, YGrid::for_params(&params))
    }

    pub fn params(&self) -> &NoiseParams {
        &self.params
    }

    pub fn grid(&self) -> &YGrid {
        &self.grid
    }

    pub fn mu_of(&self, r: u32) -> f64 {
        self.mu[r as usize]
    }

    pub fn sigma_of(&self, r: u32) -> f64 {
        self.sigma[r as usize]
    }

    pub fn flagged_values(&self) -> usize {
        self.flagged
    }

    pub fn apply(&self, readings: &SensorReadings) -> Result<PosteriorGrid, PosteriorError> {
        if readings.params() != &self.params {
            return Err(PosteriorError::ParamsMismatch);
        }
        let geom = *readings.geometry();
        let mu = readings.data().mapv(|r| self.mu[r as usize]);
        let sigma = readings.data().mapv(|r| self.sigma[r as usize]);
        PosteriorGrid::new(
            Sinogram::new(geom, mu).expect("reading shape matches geometry"),
            Sinogram::new(geom, sigma).expect("reading shape matches geometry"),
        )
    }
}

/// Posterior summaries for a whole readings matrix under the default grid,
/// memoizing per distinct reading value (there are at most `2^b`).
pub fn posterior_oracle_grid(readings: &SensorReadings) -> PosteriorGrid {
    let params = *readings.params();
    let grid = YGrid::for_params(&params);
    let mut memo: HashMap<u32, PixelPosterior> = HashMap::new();
    let geom = *readings.geometry();
    let mut mu = Array2::zeros(geom.sino_shape());
    let mut sigma = Array2::zeros(geom.sino_shape());
    let mut flagged = 0usize;
    for ((idx, &r), (mu_out, sigma_out)) in readings
        .data()
        .indexed_iter()
        .zip(mu.iter_mut().zip(sigma.iter_mut()))
    {
        let _ = idx;
        let post = *memo.entry(r).or_insert_with(|| {
            let p = posterior_pixel_detailed(r, &params, &grid);
            if p.boundary_mass > BOUNDARY_MASS_LIMIT {
                flagged += 1;
            }
            p
        });
        *mu_out = post.mu;
        *sigma_out = post.sigma;
    }
    if flagged > 0 {
        log::warn!(
            "posterior oracle: {flagged} distinct reading values kept non-negligible mass at the prior boundary"
        );
    }
    PosteriorGrid::new(
        Sinogram::new(geom, mu).expect("shape matches"),
        Sinogram::new(geom, sigma).expect("shape matches"),
    )
    .expect("shapes and floor enforced here")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::ScanGeometry;
    use crate::rng;
    use crate::sensor::{sample_poisson, simulate_readings};
    use ndarray::Array2;
    use rand::Rng;

    /// Monte-Carlo rejection sampling agrees with the numerical integral:
    /// draw y uniformly, push it through the real simulator, keep draws that
    /// produce the target reading, and compare the kept-sample mean.
    #[test]
    fn oracle_matches_rejection_sampling() {
        let p = NoiseParams::new(10_000.0f64.ln(), 0.0, 1.0, 16).unwrap();
        let grid = YGrid::for_params(&p);
        let r_target = 100u32;
        let post = posterior_pixel_detailed(r_target, &p, &grid);

        // Poisson(exp(s - y)) = 100 peaks where exp(s - y) = 100.
        let peak = p.s - (r_target as f64).ln();
        assert!((post.mu - peak).abs() < 0.02, "mu {} vs peak {peak}", post.mu);

        let mut stream = rng::root(2024);
        let mut kept = Vec::new();
        for _ in 0..1_000_000 {
            let y = grid.min + (grid.max - grid.min) * stream.random::<f64>();
            let n = sample_poisson(p.mean_counts(y), &mut stream);
            if quantize(n, p.k, p.b) == r_target {
                kept.push(y);
            }
        }
        assert!(kept.len() > 200, "rejection sampler kept too few draws");
        let mc_mean = kept.iter().sum::<f64>() / kept.len() as f64;
        let mc_var = kept.iter().map(|y| (y - mc_mean).powi(2)).sum::<f64>()
            / (kept.len() as f64 - 1.0);
        let se = (mc_var / kept.len() as f64).sqrt();
        assert!(
            (post.mu - mc_mean).abs() < 5.0 * se,
            "oracle {} vs MC {} (se {se})",
            post.mu,
            mc_mean
        );
        assert!((post.sigma - mc_var.sqrt()).abs() / mc_var.sqrt() < 0.2);
    }

    /// One-bit detector: the two readings partition probability exactly.
    #[test]
    fn readings_partition_probability_at_b1() {
        let p = NoiseParams::new(50.0f64.ln(), 2.5, 3.0, 1).unwrap();
        for y in [-0.5, 0.0, 1.0, 2.5, 4.0] {
            let total = likelihood(0, &p, y) + likelihood(1, &p, y);
            assert!((total - 1.0).abs() < 1e-9, "y={y}: {total}");
        }
    }

    /// More photons mean less attenuation: with no electronic noise the
    /// posterior mean decreases as the reading climbs through interior bins.
    #[test]
    fn posterior_mean_monotone_in_reading() {
        let p = NoiseParams::new(1000.0f64.ln(), 0.0, 4.0, 8).unwrap();
        let table = PosteriorTable::with_default_grid(p).unwrap();
        for r in 1..(p.r_max() - 1) {
            assert!(
                table.mu_of(r + 1) <= table.mu_of(r) + 1e-9,
                "mu({}) = {} > mu({}) = {}",
                r + 1,
                table.mu_of(r + 1),
                r,
                table.mu_of(r)
            );
        }
    }

    /// The clamped end bins absorb unbounded tails, so each is more
    /// uncertain than the interior neighbors sharing its count scale.
    /// (Bins far apart are not comparable: posterior width in y grows as
    /// counts fall, so low interior bins are wide too.)
    #[test]
    fn saturated_bin_is_most_uncertain() {
        let p = NoiseParams::new(2000.0f64.ln(), 4.0, 30.0, 4).unwrap();
        let table = PosteriorTable::with_default_grid(p).unwrap();
        let top = table.sigma_of(p.r_max());
        for r in [p.r_max() - 1, p.r_max() - 2, p.r_max() - 3] {
            assert!(
                top > table.sigma_of(r),
                "sigma(top) = {top} <= sigma({r}) = {}",
                table.sigma_of(r)
            );
        }
        let bottom = table.sigma_of(0);
        for r in [1, 2, 3] {
            assert!(
                bottom > table.sigma_of(r),
                "sigma(0) = {bottom} <= sigma({r}) = {}",
                table.sigma_of(r)
            );
        }
    }

    #[test]
    fn grid_oracle_matches_pixel_calls_and_permutes() {
        let geom = ScanGeometry::new(8, 8).unwrap();
        let p = NoiseParams::new(200.0f64.ln(), 1.0, 20.0, 4).unwrap();
        let y = Sinogram::new(
            geom,
            Array2::from_shape_fn(geom.sino_shape(), |(a, d)| 0.3 * (a as f64) + 0.1 * d as f64),
        )
        .unwrap();
        let readings = simulate_readings(&y, &p, 3).unwrap();
        let grid = YGrid::for_params(&p);
        let post = posterior_oracle_grid(&readings);
        for a in 0..8 {
            for d in 0..8 {
                let (mu, sigma) = posterior_oracle_pixel(readings.data()[[a, d]], &p, &grid);
                assert_eq!(post.mu().data()[[a, d]], mu);
                assert_eq!(post.sigma().data()[[a, d]], sigma);
            }
        }
        // Equal readings give equal summaries wherever they appear.
        let flat = SensorReadings::new(geom, p, Array2::from_elem(geom.sino_shape(), 7)).unwrap();
        let post_flat = posterior_oracle_grid(&flat);
        let m0 = post_flat.mu().data()[[0, 0]];
        assert!(post_flat.mu().data().iter().all(|&m| m == m0));
    }

    #[test]
    fn narrow_grid_is_flagged() {
        let p = NoiseParams::new(100.0f64.ln(), 0.0, 1.0, 8).unwrap();
        let wide = YGrid::for_params(&p);
        let at = posterior_pixel_detailed(50, &p, &wide);
        assert!(at.boundary_mass <= BOUNDARY_MASS_LIMIT);
        let narrow = YGrid::new(at.mu - 0.02, at.mu + 0.02, 0.001).unwrap();
        let clipped = posterior_pixel_detailed(50, &p, &narrow);
        assert!(clipped.boundary_mass > BOUNDARY_MASS_LIMIT);
    }

    #[test]
    fn impossible_reading_falls_back_to_prior() {
        let p = NoiseParams::new(100.0f64.ln(), 0.0, 1.0, 8).unwrap();
        // Grid confined to near-dark values, reading implies ~50 photons.
        let grid = YGrid::new(p.s + 3.0, p.s + 4.0, 0.01).unwrap();
        let post = posterior_pixel_detailed(50, &p, &grid);
        assert_eq!(post.boundary_mass, 1.0);
        assert!(post.mu.is_finite() && post.sigma.is_finite());
    }

    #[test]
    fn sigma_floor_is_enforced() {
        let geom = ScanGeometry::new(4, 2).unwrap();
        let mu = Sinogram::new(geom, Array2::zeros(geom.sino_shape())).unwrap();
        let sigma = Sinogram::new(geom, Array2::from_elem(geom.sino_shape(), 1e-9)).unwrap();
        let post = PosteriorGrid::new(mu, sigma).unwrap();
        assert!(post.sigma().data().iter().all(|&s| s == SIGMA_FLOOR));
    }
}
