//! Univariate truncated normal draws.

use std::f64::consts::SQRT_2;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use statrs::function::erf::{erfc, erfc_inv};

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

fn upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Draws from `N(0, 1)` restricted to `[a, b]`, `a < b`.
fn standard<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if b <= 0.0 {
        return -standard(-b, -a, rng);
    }
    if a >= 8.0 {
        return far_tail(a, b, rng);
    }
    if a >= 0.0 {
        let (qa, qb) = (upper_tail(a), upper_tail(b));
        let p = qb + rng.random::<f64>() * (qa - qb);
        return (SQRT_2 * erfc_inv(2.0 * p)).clamp(a, b);
    }
    let (pa, pb) = (norm_cdf(a), norm_cdf(b));
    let p = pa + rng.random::<f64>() * (pb - pa);
    norm_quantile(p).clamp(a, b)
}

/// Rejection sampler for `[a, b]` with `a ≥ 8`.
fn far_tail<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if b - a < 1.0 / a {
        loop {
            let x = a + rng.random::<f64>() * (b - a);
            if rng.random::<f64>() <= (-0.5 * (x * x - a * a)).exp() {
                return x;
            }
        }
    }
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let x = a + exp.sample(rng);
        if x > b {
            continue;
        }
        if rng.random::<f64>() <= (-0.5 * (x - rate).powi(2)).exp() {
            return x;
        }
    }
}

/// Draws from `N(mean, sd²)` restricted to `[lo, hi]`.
pub fn sample_truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    debug_assert!(lo < hi && sd > 0.0);
    let (a, b) = ((lo - mean) / sd, (hi - mean) / sd);
    if (b - a) < 1e-7 && a.abs().max(b.abs()) < 1.0 || !sd.is_finite() {
        return lo + rng.random::<f64>() * (hi - lo);
    }
    (mean + sd * standard(a, b, rng)).clamp(lo, hi)
}
