//! Small numeric helpers shared across estimators.

use std::f64::consts::SQRT_2;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

#[inline]
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with denominator `n - 1`.
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Left-inverse empirical quantile `inf{q : F_n(q) >= p}` of unweighted data.
pub fn empirical_quantile(xs: &[f64], p: f64) -> f64 {
    assert!(!xs.is_empty());
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    sorted_quantile(&v, p)
}

/// As [`empirical_quantile`] for already sorted data.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    // smallest k (1-based) with k/n >= p
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    // guard against p*n landing a hair above an integer
    let k = if k > 1 && ((k - 1) as f64) / n as f64 >= p {
        k - 1
    } else {
        k
    };
    sorted[k - 1]
}

/// Interquartile range using the left-inverse quantile.
pub fn iqr(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    sorted_quantile(&v, 0.75) - sorted_quantile(&v, 0.25)
}
