//! Loss functions on sinogram-shaped fields and image-quality metrics.
//!
//! These are the array-level (non-differentiable) definitions; the tensor
//! engine mirrors the losses as graph ops and is tested against these.

use crate::geom::{ImageGrid, Sinogram};
use crate::posterior::SIGMA_FLOOR;
use crate::real::Real;
use ndarray::Array2;

/// SSIM regularization constants, per the standard definition.
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Gaussian window: 11 x 11 taps, standard deviation 1.5 pixels.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// `sum_i (v_i / sigma_i)^2` — the sigma-weighted squared norm.
pub fn weighted_sino_norm(v: &Sinogram<f64>, sigma: &Sinogram<f64>) -> f64 {
    assert_eq!(v.geometry(), sigma.geometry(), "weighted norm geometry mismatch");
    v.data()
        .iter()
        .zip(sigma.data().iter())
        .map(|(&vi, &si)| {
            let t = vi / si;
            t * t
        })
        .sum()
}

/// Mean over entries of `(y - mu)^2 / sigma^2 + 2 ln sigma`: the Gaussian
/// negative log-likelihood up to its additive constant.
pub fn posterior_nll(y: &Sinogram<f64>, mu: &Sinogram<f64>, sigma: &Sinogram<f64>) -> f64 {
    assert_eq!(y.geometry(), mu.geometry(), "nll geometry mismatch");
    assert_eq!(y.geometry(), sigma.geometry(), "nll geometry mismatch");
    let n = y.data().len() as f64;
    y.data()
        .iter()
        .zip(mu.data().iter())
        .zip(sigma.data().iter())
        .map(|((&yi, &mi), &si)| {
            let d = yi - mi;
            d * d / (si * si) + 2.0 * si.ln()
        })
        .sum::<f64>()
        / n
}

/// Diversity-preserving data term: treats a sample pair as a two-point
/// Gaussian fit and penalizes its divergence from the target posterior.
///
/// With `sigma_p = max(|y1 - y2| / sqrt(2), sigma_floor)` per entry:
///
/// ```text
/// || (y1 + y2)/2 - mu ||^2_sigma  +  sum_i [ 2 ln(sigma_i / sigma_p_i) + (sigma_p_i / sigma_i)^2 ]
/// ```
///
/// The per-entry spread term is minimized (value 1) exactly at
/// `sigma_p = sigma`, so collapsing the pair (`y1 == y2`) pays the maximal
/// spread penalty instead of gaming the fit.
pub fn kl_diversity_loss(
    y1: &Sinogram<f64>,
    y2: &Sinogram<f64>,
    mu: &Sinogram<f64>,
    sigma: &Sinogram<f64>,
) -> f64 {
    assert_eq!(y1.geometry(), y2.geometry(), "diversity loss geometry mismatch");
    assert_eq!(y1.geometry(), mu.geometry(), "diversity loss geometry mismatch");
    assert_eq!(y1.geometry(), sigma.geometry(), "diversity loss geometry mismatch");
    let mut acc = 0.0;
    for (((&a, &b), &m), &s) in y1
        .data()
        .iter()
        .zip(y2.data().iter())
        .zip(mu.data().iter())
        .zip(sigma.data().iter())
    {
        let mean_dev = 0.5 * (a + b) - m;
        let sigma_p = ((a - b).abs() / std::f64::consts::SQRT_2).max(SIGMA_FLOOR);
        let ratio = sigma_p / s;
        acc += (mean_dev / s).powi(2) + 2.0 * (s / sigma_p).ln() + ratio * ratio;
    }
    acc
}

fn gaussian_window() -> Array2<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Array2::zeros((SSIM_WINDOW, SSIM_WINDOW));
    let inv = 1.0 / (2.0 * SSIM_SIGMA * SSIM_SIGMA);
    for u in 0..SSIM_WINDOW {
        for v in 0..SSIM_WINDOW {
            let du = u as isize - half;
            let dv = v as isize - half;
            w[[u, v]] = (-((du * du + dv * dv) as f64) * inv).exp();
        }
    }
    let total = w.sum();
    w.mapv_inplace(|x| x / total);
    w
}

/// 'Same'-size windowed convolution with zero padding outside the image.
fn window_filter(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let (n, m) = x.dim();
    let half = (SSIM_WINDOW / 2) as isize;
    let mut out = Array2::zeros((n, m));
    for i in 0..n as isize {
        for j in 0..m as isize {
            let mut acc = 0.0;
            for u in 0..SSIM_WINDOW as isize {
                let ii = i + u - half;
                if ii < 0 || ii >= n as isize {
                    continue;
                }
                for v in 0..SSIM_WINDOW as isize {
                    let jj = j + v - half;
                    if jj < 0 || jj >= m as isize {
                        continue;
                    }
                    acc += w[[u as usize, v as usize]] * x[[ii as usize, jj as usize]];
                }
            }
            out[[i as usize, j as usize]] = acc;
        }
    }
    out
}

/// Structural similarity between two images on one geometry: Gaussian
/// 11x11 windows (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range taken as
/// the value range covered by the two images together (symmetric in the
/// arguments), averaged over the inscribed circle only.
pub fn ssim<T: Real>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> f64 {
    assert_eq!(a.geometry(), b.geometry(), "ssim geometry mismatch");
    let geom = *a.geometry();
    let xa = a.data().mapv(|v| v.to_f64_());
    let xb = b.data().mapv(|v| v.to_f64_());

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in xa.iter().chain(xb.iter()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let range = hi - lo;
    if range == 0.0 {
        // Both images are one constant, and the same constant: identical.
        return 1.0;
    }
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);

    let w = gaussian_window();
    let mu_a = window_filter(&xa, &w);
    let mu_b = window_filter(&xb, &w);
    let e_aa = window_filter(&(&xa * &xa), &w);
    let e_bb = window_filter(&(&xb * &xb), &w);
    let e_ab = window_filter(&(&xa * &xb), &w);

    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..geom.image_size() {
        for j in geom.circle_span(i) {
            let ma = mu_a[[i, j]];
            let mb = mu_b[[i, j]];
            let va = e_aa[[i, j]] - ma * ma;
            let vb = e_bb[[i, j]] - mb * mb;
            let cov = e_ab[[i, j]] - ma * mb;
            let val = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += val;
            count += 1;
        }
    }
    total / count as f64
}
