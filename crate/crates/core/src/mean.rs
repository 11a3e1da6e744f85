//! Average effects: DSM estimators of the ATE and ATT, and the naive, IPW
//! and AIPW comparators.
//!
//! The matched estimators come in two algebraically equal forms. The
//! imputation form averages observed and imputed potential outcomes and
//! subtracts the matching-discrepancy correction. The linear form writes
//! the same number as a sum over units with implicit weights `1 + K/M`;
//! the bootstrap evaluates the linear form with perturbed unit weights.

use crate::data::Dataset;
use crate::error::{DsmError, Result};
use crate::matching::{match_group, MatchMap};
use crate::models::ScoreSet;
use crate::sieve::{fit_sieve, SieveFit};

#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimate {
    pub value: f64,
    pub estimator_tag: String,
    pub initial: Option<f64>,
    pub bias_correction: Option<f64>,
}

fn weight(w: Option<&[f64]>, i: usize) -> f64 {
    w.map_or(1.0, |w| w[i])
}

/// `K(i)/M`, taking `K` from the map in which unit `i` is a donor.
pub fn donor_k_over_m(maps: &[&MatchMap], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for map in maps {
        let m = map.m as f64;
        for (o, &k) in out.iter_mut().zip(&map.k) {
            *o += k as f64 / m;
        }
    }
    out
}

/// Mean of donor values for every query of `map`.
fn donor_means(map: &MatchMap, v: &[f64]) -> Vec<f64> {
    let m = map.m as f64;
    map.matches
        .iter()
        .map(|js| js.iter().map(|&j| v[j]).sum::<f64>() / m)
        .collect()
}

/// Initial DSM estimate, imputation form: `n^-1 sum_i {Y_i(1) - Y_i(0)}`
/// with missing potential outcomes imputed by matched-donor means.
/// `map0` imputes `Y(0)` for treated units, `map1` imputes `Y(1)` for
/// controls.
pub fn dsm_ate_initial(y: &[f64], a: &[u8], map0: &MatchMap, map1: &MatchMap) -> f64 {
    let n = y.len();
    let mut y0 = vec![f64::NAN; n];
    let mut y1 = vec![f64::NAN; n];
    for i in 0..n {
        if a[i] == 1 {
            y1[i] = y[i];
        } else {
            y0[i] = y[i];
        }
    }
    for (q, v) in map0.queries.iter().zip(donor_means(map0, y)) {
        y0[*q] = v;
    }
    for (q, v) in map1.queries.iter().zip(donor_means(map1, y)) {
        y1[*q] = v;
    }
    (0..n).map(|i| y1[i] - y0[i]).sum::<f64>() / n as f64
}

/// Matching-discrepancy correction subtracted from the initial estimate.
/// Treated queries contribute `+{mu0(S0_i) - mean_j mu0(S0_j)}`, control
/// queries `-{mu1(S1_i) - mean_j mu1(S1_j)}`.
pub fn dsm_ate_bias_correction(map0: &MatchMap, map1: &MatchMap, mu0: &[f64], mu1: &[f64]) -> f64 {
    let n = mu0.len() as f64;
    let t: f64 = map0
        .queries
        .iter()
        .zip(donor_means(map0, mu0))
        .map(|(&i, d)| mu0[i] - d)
        .sum();
    let c: f64 = map1
        .queries
        .iter()
        .zip(donor_means(map1, mu1))
        .map(|(&i, d)| mu1[i] - d)
        .sum();
    (t - c) / n
}

/// `n^-1 sum_i w_i [mu1_i - mu0_i + (2A_i - 1)(1 + K_i/M)(Y_i - mu_{A_i,i})]`.
pub fn ate_linear_form(
    y: &[f64],
    a: &[u8],
    k_over_m: &[f64],
    mu0: &[f64],
    mu1: &[f64],
    weights: Option<&[f64]>,
) -> f64 {
    let n = y.len();
    let mut s = 0.0;
    for i in 0..n {
        let (sign, mu_a) = if a[i] == 1 { (1.0, mu1[i]) } else { (-1.0, mu0[i]) };
        s += weight(weights, i)
            * (mu1[i] - mu0[i] + sign * (1.0 + k_over_m[i]) * (y[i] - mu_a));
    }
    s / n as f64
}

/// Initial ATT: `n1^-1 sum_{A_i=1} {Y_i - mean_j Y_j}` over control donors.
pub fn dsm_att_initial(y: &[f64], map0: &MatchMap) -> f64 {
    let n1 = map0.queries.len() as f64;
    map0.queries
        .iter()
        .zip(donor_means(map0, y))
        .map(|(&i, d)| y[i] - d)
        .sum::<f64>()
        / n1
}

pub fn dsm_att_bias_correction(map0: &MatchMap, mu0: &[f64]) -> f64 {
    let n1 = map0.queries.len() as f64;
    map0.queries
        .iter()
        .zip(donor_means(map0, mu0))
        .map(|(&i, d)| mu0[i] - d)
        .sum::<f64>()
        / n1
}

/// `n1^-1 sum_i w_i {A_i - (1 - A_i) K_i/M}(Y_i - mu0_i)`; the treated-arm
/// mean function cancels from the ATT linear form.
pub fn att_linear_form(
    y: &[f64],
    a: &[u8],
    k_over_m: &[f64],
    mu0: &[f64],
    weights: Option<&[f64]>,
) -> f64 {
    let n1 = a.iter().filter(|&&v| v == 1).count() as f64;
    let mut s = 0.0;
    for i in 0..y.len() {
        let c = if a[i] == 1 { 1.0 } else { -k_over_m[i] };
        s += weight(weights, i) * c * (y[i] - mu0[i]);
    }
    s / n1
}

/// Sieve fit of `Y` on the arm-`arm` scores over units with `A = arm`.
pub fn fit_sieve_mean(
    scores: &ScoreSet,
    dataset: &Dataset,
    arm: u8,
    degree: usize,
    weights: &[f64],
) -> Result<SieveFit> {
    fit_sieve(
        scores.arm(arm),
        dataset.y(),
        &dataset.arm_indices(arm),
        weights,
        degree,
    )
}

fn warn_dropped(fit: &SieveFit, arm: u8) {
    if !fit.dropped.is_empty() {
        log::warn!(
            "sieve for arm {arm}: dropped collinear terms {:?}",
            fit.dropped_names()
        );
    }
}

/// De-biased DSM estimate of the ATE.
pub fn dsm_ate(dataset: &Dataset, scores: &ScoreSet, m: usize, degree: usize) -> Result<PointEstimate> {
    let a = dataset.a();
    let y = dataset.y();
    let map0 = match_group(&scores.s0, a, 0, m)?;
    let map1 = match_group(&scores.s1, a, 1, m)?;
    let ones = vec![1.0; dataset.n()];
    let fit0 = fit_sieve_mean(scores, dataset, 0, degree, &ones)?;
    let fit1 = fit_sieve_mean(scores, dataset, 1, degree, &ones)?;
    warn_dropped(&fit0, 0);
    warn_dropped(&fit1, 1);
    let initial = dsm_ate_initial(y, a, &map0, &map1);
    let correction = dsm_ate_bias_correction(&map0, &map1, &fit0.fitted, &fit1.fitted);
    Ok(PointEstimate {
        value: initial - correction,
        estimator_tag: "dsm".into(),
        initial: Some(initial),
        bias_correction: Some(correction),
    })
}

/// De-biased DSM estimate of the ATT, matching treated units to controls
/// on `S0`.
pub fn dsm_att(dataset: &Dataset, scores: &ScoreSet, m: usize, degree: usize) -> Result<PointEstimate> {
    let map0 = match_group(&scores.s0, dataset.a(), 0, m)?;
    let ones = vec![1.0; dataset.n()];
    let fit0 = fit_sieve_mean(scores, dataset, 0, degree, &ones)?;
    warn_dropped(&fit0, 0);
    let initial = dsm_att_initial(dataset.y(), &map0);
    let correction = dsm_att_bias_correction(&map0, &fit0.fitted);
    Ok(PointEstimate {
        value: initial - correction,
        estimator_tag: "dsm".into(),
        initial: Some(initial),
        bias_correction: Some(correction),
    })
}

fn check_len(n: usize, v: &[f64]) -> Result<()> {
    if v.len() != n {
        return Err(DsmError::Dimension {
            expected: n,
            got: v.len(),
        });
    }
    Ok(())
}

/// Weighted arm means of `Y`.
fn arm_means(y: &[f64], a: &[u8], weights: Option<&[f64]>) -> (f64, f64) {
    let mut s = [0.0; 2];
    let mut w = [0.0; 2];
    for i in 0..y.len() {
        let k = usize::from(a[i]);
        s[k] += weight(weights, i) * y[i];
        w[k] += weight(weights, i);
    }
    (s[0] / w[0], s[1] / w[1])
}

/// Difference of arm means. Serves as both naive ATE and naive ATT.
pub fn naive_ate(y: &[f64], a: &[u8], weights: Option<&[f64]>) -> f64 {
    let (m0, m1) = arm_means(y, a, weights);
    m1 - m0
}

/// Unnormalized inverse probability weighting with clipped propensities.
pub fn ipw_ate(y: &[f64], a: &[u8], e: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    check_len(y.len(), e)?;
    let mut s = 0.0;
    for i in 0..y.len() {
        let t = if a[i] == 1 {
            y[i] / e[i]
        } else {
            -y[i] / (1.0 - e[i])
        };
        s += weight(weights, i) * t;
    }
    Ok(s / y.len() as f64)
}

pub fn aipw_ate(
    y: &[f64],
    a: &[u8],
    e: &[f64],
    mu0: &[f64],
    mu1: &[f64],
    weights: Option<&[f64]>,
) -> Result<f64> {
    check_len(y.len(), e)?;
    check_len(y.len(), mu0)?;
    check_len(y.len(), mu1)?;
    let mut s = 0.0;
    for i in 0..y.len() {
        let aug = if a[i] == 1 {
            (y[i] - mu1[i]) / e[i]
        } else {
            -(y[i] - mu0[i]) / (1.0 - e[i])
        };
        s += weight(weights, i) * (mu1[i] - mu0[i] + aug);
    }
    Ok(s / y.len() as f64)
}

/// `n1^-1 sum_i [A_i Y_i - (1 - A_i) e_i/(1 - e_i) Y_i]`.
pub fn ipw_att(y: &[f64], a: &[u8], e: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    check_len(y.len(), e)?;
    let n1 = a.iter().filter(|&&v| v == 1).count() as f64;
    let mut s = 0.0;
    for i in 0..y.len() {
        let t = if a[i] == 1 {
            y[i]
        } else {
            -e[i] / (1.0 - e[i]) * y[i]
        };
        s += weight(weights, i) * t;
    }
    Ok(s / n1)
}

/// `n1^-1 sum_i [A_i - (1 - A_i) e_i/(1 - e_i)](Y_i - mu0_i)`.
pub fn aipw_att(
    y: &[f64],
    a: &[u8],
    e: &[f64],
    mu0: &[f64],
    weights: Option<&[f64]>,
) -> Result<f64> {
    check_len(y.len(), e)?;
    check_len(y.len(), mu0)?;
    let n1 = a.iter().filter(|&&v| v == 1).count() as f64;
    let mut s = 0.0;
    for i in 0..y.len() {
        let c = if a[i] == 1 { 1.0 } else { -e[i] / (1.0 - e[i]) };
        s += weight(weights, i) * c * (y[i] - mu0[i]);
    }
    Ok(s / n1)
}
