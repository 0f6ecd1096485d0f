//! One-sample Kolmogorov–Smirnov test.

use crate::error::{invalid, Result};

/// Survival function of the Kolmogorov distribution, `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.18 {
        // small-x form converges faster here
        let y = -std::f64::consts::PI.powi(2) / (8.0 * x * x);
        let s: f64 = (1..=9).step_by(2).map(|k| (y * (k * k) as f64).exp()).sum();
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / x * s;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Statistic `D = sup |F_n − F|` and its asymptotic p-value with the
/// Stephens finite-sample correction.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return invalid("KS test needs samples");
    }
    let mut xs = samples.to_vec();
    if xs.iter().any(|x| x.is_nan()) {
        return invalid("KS test samples contain NaN");
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sn = n.sqrt();
    Ok((d, kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)))
}

/// KS test against an exponential distribution with the given rate.
pub fn ks_test_exponential(samples: &[f64], rate: f64) -> Result<(f64, f64)> {
    ks_test(samples, |x| if x <= 0.0 { 0.0 } else { -(-rate * x).exp_m1() })
}
