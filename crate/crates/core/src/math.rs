//! Small special-function helpers shared by the sensor model and the
//! posterior oracle.

/// Natural log of the gamma function, Lanczos approximation (g = 7, 9
/// terms). Relative error below ~1e-13 for positive arguments, which is far
/// tighter than anything the samplers or the oracle need.
pub(crate) fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula keeps the approximation in its sweet spot.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Complementary error function: Maclaurin series near zero, Laplace
/// continued fraction in the tails. Absolute error stays near machine
/// precision, which the posterior oracle's interval masses rely on.
pub(crate) fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        return 1.0 - erf_series(x);
    }
    // Backward evaluation of erfc(x) = exp(-x^2)/sqrt(pi) * K with
    // K = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))).
    let mut tail = 0.0;
    for n in (1..=64u32).rev() {
        tail = (n as f64 / 2.0) / (x + tail);
    }
    (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + tail)
}

/// erf via its alternating Maclaurin series; accurate for |x| < ~3.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut power = x; // (-1)^n x^(2n+1) / n!
    let mut sum = x;
    for n in 1..200 {
        power *= -x2 / n as f64;
        let term = power / (2 * n + 1) as f64;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// Standard normal cumulative distribution function.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_matches_log_factorials() {
        let mut acc = 0.0;
        for k in 1..=150u32 {
            acc += (k as f64).ln();
            let got = ln_gamma(k as f64 + 1.0);
            assert!(
                (got - acc).abs() <= 1e-10 * acc.max(1.0),
                "k={k}: {got} vs {acc}"
            );
        }
    }

    #[test]
    fn ln_gamma_half_integer() {
        // Gamma(1/2) = sqrt(pi).
        let want = 0.5 * std::f64::consts::PI.ln();
        assert!((ln_gamma(0.5) - want).abs() < 1e-12);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-9);
        // Phi(1) and Phi(-1) from tables, and symmetry.
        assert!((normal_cdf(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((normal_cdf(-1.0) + normal_cdf(1.0) - 1.0).abs() < 1e-9);
        assert!(normal_cdf(-9.0) < 1e-18);
        assert!(normal_cdf(9.0) > 1.0 - 1e-15);
    }
}
