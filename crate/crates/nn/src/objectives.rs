//! Training objectives assembled on the tape, plus latent sampling.
//!
//! Each loss mirrors a reference implementation in the core metrics module;
//! the identity tests keep the two in lockstep so gradients always descend
//! the quantity the evaluation reports.

use crate::graph::{Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use tomoforge_core::rng::Stream;
use tomoforge_core::Real;

/// Sum of squared sigma-weighted entries: ||v||^2 with every entry divided
/// by its posterior spread first.
pub fn weighted_norm_node<T: Real>(g: &mut Graph<T>, v: Var, sigma: Var) -> Var {
    let r = g.div(v, sigma);
    let sq = g.mul(r, r);
    g.sum(sq)
}

/// Mean Gaussian negative log likelihood (up to its constant):
/// mean[(y - mu)^2 / sigma^2 + 2 ln sigma].
pub fn posterior_nll_node<T: Real>(g: &mut Graph<T>, y: Var, mu: Var, sigma: Var) -> Var {
    let d = g.sub(y, mu);
    let r = g.div(d, sigma);
    let sq = g.mul(r, r);
    let ls = g.ln(sigma);
    let two_ls = g.mul_scalar(ls, T::from_f64(2.0));
    let total = g.add(sq, two_ls);
    g.mean(total)
}

/// Diversity-matching objective for a sample pair: the sigma-weighted
/// distance of the pair mean from the posterior mean, plus a per-entry
/// spread-matching term 2 ln(sigma/sp) + (sp/sigma)^2 with
/// sp = max(|y1 - y2| / sqrt(2), floor).
pub fn kl_diversity_node<T: Real>(
    g: &mut Graph<T>,
    y1: Var,
    y2: Var,
    mu: Var,
    sigma: Var,
    floor: f64,
) -> Var {
    let pair_sum = g.add(y1, y2);
    let avg = g.mul_scalar(pair_sum, T::from_f64(0.5));
    let dev = g.sub(avg, mu);
    let data = weighted_norm_node(g, dev, sigma);

    let diff = g.sub(y1, y2);
    let adiff = g.abs(diff);
    let sp_raw = g.mul_scalar(adiff, T::from_f64(1.0 / std::f64::consts::SQRT_2));
    let sp = g.clamp_min(sp_raw, T::from_f64(floor));
    let ratio = g.div(sp, sigma);
    let lnr = g.ln(ratio);
    let neg2ln = g.mul_scalar(lnr, T::from_f64(-2.0));
    let rsq = g.mul(ratio, ratio);
    let per_entry = g.add(neg2ln, rsq);
    let spread = g.sum(per_entry);

    g.add(data, spread)
}

/// What the critic descends: score of real samples minus score of generated
/// ones, averaged over the batch.
pub fn critic_loss_node<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Var {
    let r = g.mean(d_real);
    let f = g.mean(d_fake);
    g.sub(r, f)
}

/// What the generator descends for one reading and a sample pair:
/// the diversity objective plus lambda times the mean critic score of the
/// pair.
pub fn generator_loss_node<T: Real>(
    g: &mut Graph<T>,
    kl: Var,
    d1: Var,
    d2: Var,
    lambda: f64,
) -> Var {
    let s1 = g.mean(d1);
    let s2 = g.mean(d2);
    let both = g.add(s1, s2);
    let avg = g.mul_scalar(both, T::from_f64(0.5));
    let weighted = g.mul_scalar(avg, T::from_f64(lambda));
    g.add(kl, weighted)
}

/// Draws a batch of latents uniformly on the unit sphere: i.i.d. normals,
/// each item normalized to unit Euclidean length over all of its entries.
pub fn sample_latent_sphere<T: Real>(
    rng: &mut Stream,
    batch: usize,
    shape: (usize, usize, usize),
) -> ArrayD<T> {
    let (c, h, w) = shape;
    let mut z = ArrayD::<T>::zeros(IxDyn(&[batch, c, h, w]));
    for b in 0..batch {
        let mut item = z.index_axis_mut(ndarray::Axis(0), b);
        for v in item.iter_mut() {
            *v = T::from_f64(rng.sample::<f64, _>(StandardNormal));
        }
        let norm = item.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            item.mapv_inplace(|v| v / norm);
        }
    }
    z
}

/// Rescales each batch item of `z` back onto the unit sphere in place.
pub fn project_to_sphere<T: Real>(z: &mut ArrayD<T>) {
    for mut item in z.axis_iter_mut(ndarray::Axis(0)) {
        let norm = item.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            item.mapv_inplace(|v| v / norm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use tomoforge_core::geom::{ScanGeometry, Sinogram};
    use tomoforge_core::metrics;
    use tomoforge_core::posterior::SIGMA_FLOOR;
    use tomoforge_core::rng::{phase_seed, root};

    fn rand_sino(seed: u64, offset: f64) -> Array2<f64> {
        let mut rng = root(phase_seed(seed, "objective-test"));
        Array2::from_shape_fn((6, 9), |_| {
            rng.sample::<f64, _>(StandardNormal) + offset
        })
    }

    fn wrap(data: Array2<f64>) -> Sinogram<f64> {
        let geom = ScanGeometry::with_detectors(8, 6, 9).unwrap();
        Sinogram::new(geom, data).unwrap()
    }

    fn to_node(g: &mut Graph<f64>, a: &Array2<f64>) -> Var {
        g.input(a.clone().into_dyn())
    }

    #[test]
    fn weighted_norm_matches_reference() {
        let v = rand_sino(1, 0.0);
        let sigma = rand_sino(2, 3.0).mapv(f64::abs);
        let mut g = Graph::checked();
        let vv = to_node(&mut g, &v);
        let sv = to_node(&mut g, &sigma);
        let node = weighted_norm_node(&mut g, vv, sv);
        let want = metrics::weighted_sino_norm(&wrap(v), &wrap(sigma));
        let got = g.scalar(node);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn nll_matches_reference_and_vanishes_at_the_mean() {
        let y = rand_sino(3, 1.0);
        let mu = rand_sino(4, 1.0);
        let sigma = rand_sino(5, 2.5).mapv(f64::abs);
        let mut g = Graph::checked();
        let yv = to_node(&mut g, &y);
        let mv = to_node(&mut g, &mu);
        let sv = to_node(&mut g, &sigma);
        let node = posterior_nll_node(&mut g, yv, mv, sv);
        let want =
            metrics::posterior_nll(&wrap(y.clone()), &wrap(mu.clone()), &wrap(sigma.clone()));
        let got = g.scalar(node);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));

        // Perfect mean and unit spread leave nothing to explain.
        let ones = Array2::from_elem((6, 9), 1.0);
        let mut g = Graph::checked();
        let yv = to_node(&mut g, &y);
        let yv2 = to_node(&mut g, &y);
        let sv = to_node(&mut g, &ones);
        let node = posterior_nll_node(&mut g, yv, yv2, sv);
        assert_eq!(g.scalar(node), 0.0);
    }

    #[test]
    fn diversity_loss_matches_reference() {
        let y1 = rand_sino(6, 0.5);
        let y2 = rand_sino(7, 0.5);
        let mu = rand_sino(8, 0.5);
        let sigma = rand_sino(9, 2.0).mapv(f64::abs);
        let mut g = Graph::checked();
        let a = to_node(&mut g, &y1);
        let b = to_node(&mut g, &y2);
        let m = to_node(&mut g, &mu);
        let s = to_node(&mut g, &sigma);
        let node = kl_diversity_node(&mut g, a, b, m, s, SIGMA_FLOOR);
        let want = metrics::kl_diversity_loss(&wrap(y1), &wrap(y2), &wrap(mu), &wrap(sigma));
        let got = g.scalar(node);
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "got {got} want {want}"
        );
    }

    /// The per-entry spread term -2 ln r + r^2 (r = sp/sigma) is minimized
    /// exactly where the pair spread equals the posterior spread.
    #[test]
    fn spread_term_is_at_least_one_with_equality_only_at_match() {
        let f = |r: f64| -2.0 * r.ln() + r * r;
        assert!((f(1.0) - 1.0).abs() < 1e-15);
        for &r in &[0.01, 0.3, 0.9, 0.999, 1.001, 1.5, 4.0] {
            assert!(f(r) > 1.0, "r = {r}");
        }
    }

    #[test]
    fn wgan_losses_have_the_documented_signs() {
        let mut g = Graph::checked();
        let real = g.input(ndarray::arr2(&[[2.0], [4.0]]).into_dyn());
        let fake = g.input(ndarray::arr2(&[[1.0], [1.0]]).into_dyn());
        let c = critic_loss_node(&mut g, real, fake);
        assert_eq!(g.scalar(c), 3.0 - 1.0);

        let kl = g.input(ArrayD::from_elem(IxDyn(&[]), 5.0));
        let d1 = g.input(ndarray::arr2(&[[2.0]]).into_dyn());
        let d2 = g.input(ndarray::arr2(&[[6.0]]).into_dyn());
        let gl = generator_loss_node(&mut g, kl, d1, d2, 0.05);
        let want: f64 = 5.0 + 0.05 * 4.0;
        assert!((g.scalar(gl) - want).abs() < 1e-15);
    }

    #[test]
    fn latents_live_on_the_unit_sphere() {
        let mut rng = root(phase_seed(10, "latent"));
        let z = sample_latent_sphere::<f64>(&mut rng, 8, (8, 4, 4));
        assert_eq!(z.shape(), &[8, 8, 4, 4]);
        for item in z.axis_iter(ndarray::Axis(0)) {
            let norm = item.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        // Projection restores the sphere after an arbitrary scaling.
        let mut scaled = z.mapv(|v| v * 3.7);
        project_to_sphere(&mut scaled);
        for item in scaled.axis_iter(ndarray::Axis(0)) {
            let norm = item.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        // Seeded reproducibility.
        let mut rng2 = root(phase_seed(10, "latent"));
        let z2 = sample_latent_sphere::<f64>(&mut rng2, 8, (8, 4, 4));
        assert_eq!(z, z2);
    }
}
