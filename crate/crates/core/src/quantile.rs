//! Quantile effects: de-biased matched CDFs, their comparators, and
//! left-inverse quantile extraction on a fixed grid.
//!
//! Every CDF estimator used here has the shape
//!
//! `F(q) = sum_i c_i 1(Y_i <= q) + sum_i d_i Phi((h(q) - m_i) / sigma)`
//!
//! with `c_i >= 0`, which [`LinearCdf`] represents directly. Inversion
//! returns the first grid point where `F` reaches the target level; this is
//! the same point at which the running maximum of `F` along the grid first
//! does, so it implements monotone rearrangement without materializing it.

use log::warn;

use crate::data::Dataset;
use crate::error::{DsmError, Result};
use crate::matching::{match_group, MatchMap};
use crate::mean::{donor_k_over_m, PointEstimate};
use crate::models::{LinearFit, ScoreSet};
use crate::sieve::{fit_sieve, SieveFit, SIGMA_FLOOR};
use crate::stats::{normal_cdf, sample_sd};

/// Equally spaced points added to the observed outcomes in every grid.
pub const GRID_EXTRA_POINTS: usize = 512;
const BLOCK: usize = 32;
/// Slack on the block upper bound that absorbs summation-order rounding.
const BOUND_SLACK: f64 = 1e-12;

/// Box-Cox transform with fixed exponent; `-inf` outside its domain so the
/// normal CDF term vanishes there.
pub fn boxcox(lambda: f64, q: f64) -> f64 {
    if q < 0.0 || (q == 0.0 && lambda <= 0.0) || q.is_nan() {
        return f64::NEG_INFINITY;
    }
    if lambda == 0.0 {
        q.ln()
    } else {
        (q.powf(lambda) - 1.0) / lambda
    }
}

fn transform(lambda: Option<f64>, q: f64) -> f64 {
    match lambda {
        Some(l) => boxcox(l, q),
        None => q,
    }
}

/// Sorted unique arm outcomes plus equally spaced points over
/// `[min - sd, max + sd]`.
pub fn inversion_grid(y_arm: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = y_arm.to_vec();
    if !y_arm.is_empty() {
        let lo = y_arm.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y_arm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sd = if y_arm.len() > 1 { sample_sd(y_arm) } else { 0.0 };
        let (a, b) = (lo - sd, hi + sd);
        let k = GRID_EXTRA_POINTS;
        for t in 0..k {
            g.push(a + (b - a) * t as f64 / (k - 1) as f64);
        }
    }
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantile {
    pub value: f64,
    /// False when the CDF never reached the level on the grid; `value` is
    /// then the last grid point.
    pub attained: bool,
}

/// Smallest grid point whose running-maximum CDF value is at least `xi`.
pub fn invert_cdf(cdf: impl Fn(f64) -> f64, xi: f64, grid: &[f64]) -> Quantile {
    let mut run = f64::NEG_INFINITY;
    for &g in grid {
        run = run.max(cdf(g));
        if run >= xi {
            return Quantile {
                value: g,
                attained: true,
            };
        }
    }
    Quantile {
        value: grid.last().copied().unwrap_or(f64::NAN),
        attained: false,
    }
}

/// Conditional outcome distribution `Phi((h(q) - m_i) / sigma)` per unit.
#[derive(Debug, Clone)]
pub struct CondCdfFit {
    pub arm: u8,
    /// Conditional mean of `h(Y)` at every unit.
    pub m: Vec<f64>,
    pub sigma: f64,
    pub boxcox: Option<f64>,
}

impl CondCdfFit {
    pub fn from_sieve(arm: u8, fit: &SieveFit, boxcox: Option<f64>) -> Self {
        CondCdfFit {
            arm,
            m: fit.fitted.clone(),
            sigma: fit.sigma,
            boxcox,
        }
    }

    /// Normal-linear model from a prognostic regression, evaluated at
    /// `fitted` (its predictions for all units).
    pub fn from_linear(arm: u8, fit: &LinearFit, fitted: Vec<f64>) -> Self {
        CondCdfFit {
            arm,
            m: fitted,
            sigma: fit.sigma.max(SIGMA_FLOOR),
            boxcox: None,
        }
    }

    pub fn eval(&self, q: f64, i: usize) -> f64 {
        normal_cdf((transform(self.boxcox, q) - self.m[i]) / self.sigma)
    }
}

/// Transformed outcome for the conditional CDF model; errors where the
/// transform is undefined on the fitting arm.
pub fn transformed_outcome(dataset: &Dataset, arm: u8, lambda: Option<f64>) -> Result<Vec<f64>> {
    let y = dataset.y();
    match lambda {
        None => Ok(y.to_vec()),
        Some(l) => {
            let h: Vec<f64> = y.iter().map(|&v| boxcox(l, v)).collect();
            for &i in &dataset.arm_indices(arm) {
                if !h[i].is_finite() {
                    return Err(DsmError::Domain(format!(
                        "Box-Cox transform undefined for outcome {} of unit {i}",
                        y[i]
                    )));
                }
            }
            Ok(h.into_iter().map(|v| if v.is_finite() { v } else { 0.0 }).collect())
        }
    }
}

/// Normal-linear sieve model for `F_a(q; S_a)` fitted within arm `arm`.
pub fn fit_conditional_cdf(
    scores: &ScoreSet,
    dataset: &Dataset,
    arm: u8,
    degree: usize,
    boxcox: Option<f64>,
    weights: &[f64],
) -> Result<CondCdfFit> {
    let h = transformed_outcome(dataset, arm, boxcox)?;
    let fit = fit_sieve(scores.arm(arm), &h, &dataset.arm_indices(arm), weights, degree)?;
    Ok(CondCdfFit::from_sieve(arm, &fit, boxcox))
}

/// `sum_i c_i 1(Y_i <= q) + sum_i d_i Phi((h(q) - m_i) / sigma)`.
#[derive(Debug, Clone)]
pub struct LinearCdf {
    step_y: Vec<f64>,
    /// Prefix sums of the step weights in `step_y` order.
    step_cum: Vec<f64>,
    /// Prefix sums of the positive and negative parts separately.
    step_pos: Vec<f64>,
    step_neg: Vec<f64>,
    m: Vec<f64>,
    d: Vec<f64>,
    sigma: f64,
    boxcox: Option<f64>,
}

impl LinearCdf {
    /// Pure step function with weights `c`.
    pub fn step(y: &[f64], c: &[f64]) -> Self {
        Self::new(y, c, None, &[])
    }

    /// `cond` supplies `m_i`, `sigma` and the transform; `d` its weights.
    pub fn new(y: &[f64], c: &[f64], cond: Option<&CondCdfFit>, d: &[f64]) -> Self {
        let mut pairs: Vec<(f64, f64)> = y
            .iter()
            .zip(c)
            .filter(|(_, &w)| w != 0.0)
            .map(|(&v, &w)| (v, w))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (mut acc, mut pos, mut neg) = (0.0, 0.0, 0.0);
        let mut step_y = Vec::with_capacity(pairs.len());
        let mut step_cum = Vec::with_capacity(pairs.len());
        let mut step_pos = Vec::with_capacity(pairs.len());
        let mut step_neg = Vec::with_capacity(pairs.len());
        for (v, w) in pairs {
            acc += w;
            if w > 0.0 {
                pos += w;
            } else {
                neg -= w;
            }
            step_y.push(v);
            step_cum.push(acc);
            step_pos.push(pos);
            step_neg.push(neg);
        }
        let (m, dd, sigma, boxcox) = match cond {
            Some(f) => {
                let mut m = Vec::new();
                let mut dd = Vec::new();
                for (i, &w) in d.iter().enumerate() {
                    if w != 0.0 {
                        m.push(f.m[i]);
                        dd.push(w);
                    }
                }
                (m, dd, f.sigma, f.boxcox)
            }
            None => (Vec::new(), Vec::new(), 1.0, None),
        };
        LinearCdf {
            step_y,
            step_cum,
            step_pos,
            step_neg,
            m,
            d: dd,
            sigma,
            boxcox,
        }
    }

    fn prefix(&self, sums: &[f64], q: f64) -> f64 {
        let k = self.step_y.partition_point(|&v| v <= q);
        if k == 0 {
            0.0
        } else {
            sums[k - 1]
        }
    }

    fn step_at(&self, q: f64) -> f64 {
        self.prefix(&self.step_cum, q)
    }

    pub fn eval(&self, q: f64) -> f64 {
        let h = transform(self.boxcox, q);
        let mut s = self.step_at(q);
        for (m, d) in self.m.iter().zip(&self.d) {
            s += d * normal_cdf((h - m) / self.sigma);
        }
        s
    }

    /// Positive and negative parts of the smooth term, each nondecreasing.
    fn smooth_parts(&self, q: f64) -> (f64, f64) {
        let h = transform(self.boxcox, q);
        let mut pos = 0.0;
        let mut neg = 0.0;
        for (m, d) in self.m.iter().zip(&self.d) {
            let v = d * normal_cdf((h - m) / self.sigma);
            if *d > 0.0 {
                pos += v;
            } else {
                neg -= v;
            }
        }
        (pos, neg)
    }

    /// Same result as [`invert_cdf`] with `|q| self.eval(q)`, skipping grid
    /// blocks whose upper bound stays below `xi`.
    pub fn quantile(&self, xi: f64, grid: &[f64]) -> Quantile {
        let mut start = 0;
        while start < grid.len() {
            let end = (start + BLOCK).min(grid.len()) - 1;
            let (pos_r, _) = self.smooth_parts(grid[end]);
            let (_, neg_l) = self.smooth_parts(grid[start]);
            let bound = self.prefix(&self.step_pos, grid[end]) - self.prefix(&self.step_neg, grid[start])
                + pos_r
                - neg_l;
            if bound + BOUND_SLACK >= xi {
                for &g in &grid[start..=end] {
                    if self.eval(g) >= xi {
                        return Quantile {
                            value: g,
                            attained: true,
                        };
                    }
                }
            }
            start = end + 1;
        }
        Quantile {
            value: grid.last().copied().unwrap_or(f64::NAN),
            attained: false,
        }
    }
}

fn weight(w: Option<&[f64]>, i: usize) -> f64 {
    w.map_or(1.0, |w| w[i])
}

/// De-biased matched CDF of `Y(arm)` in linear form:
/// `n^-1 sum_i w_i [F_a(q; S_i) + 1(A_i=a)(1 + K_i/M){1(Y_i <= q) - F_a(q; S_i)}]`.
pub fn dsm_arm_cdf(
    y: &[f64],
    a: &[u8],
    arm: u8,
    k_over_m: &[f64],
    cond: &CondCdfFit,
    weights: Option<&[f64]>,
) -> LinearCdf {
    let n = y.len() as f64;
    let mut c = vec![0.0; y.len()];
    let mut d = vec![0.0; y.len()];
    for i in 0..y.len() {
        let w = weight(weights, i) / n;
        let ci = if a[i] == arm { w * (1.0 + k_over_m[i]) } else { 0.0 };
        c[i] = ci;
        d[i] = w - ci;
    }
    LinearCdf::new(y, &c, Some(cond), &d)
}

/// Initial matched CDF `n^-1 sum_i 1(A_i=a)(1 + K_i/M) 1(Y_i <= q)`.
pub fn dsm_initial_cdf(y: &[f64], a: &[u8], arm: u8, k_over_m: &[f64]) -> LinearCdf {
    let n = y.len() as f64;
    let c: Vec<f64> = (0..y.len())
        .map(|i| {
            if a[i] == arm {
                (1.0 + k_over_m[i]) / n
            } else {
                0.0
            }
        })
        .collect();
    LinearCdf::step(y, &c)
}

/// De-biased matched-control CDF for the treated:
/// `n1^-1 sum_i w_i [A_i F_0(q; S_i) + (1 - A_i)(K_i/M){1(Y_i <= q) - F_0(q; S_i)}]`.
pub fn qtt_control_cdf(
    y: &[f64],
    a: &[u8],
    k_over_m: &[f64],
    cond0: &CondCdfFit,
    weights: Option<&[f64]>,
) -> LinearCdf {
    let n1 = a.iter().filter(|&&v| v == 1).count() as f64;
    let mut c = vec![0.0; y.len()];
    let mut d = vec![0.0; y.len()];
    for i in 0..y.len() {
        let w = weight(weights, i) / n1;
        if a[i] == 1 {
            d[i] = w;
        } else {
            c[i] = w * k_over_m[i];
            d[i] = -c[i];
        }
    }
    LinearCdf::new(y, &c, Some(cond0), &d)
}

/// Empirical CDF of arm `arm` with unit weights `w`, normalized to one
/// unless `scale` is given.
pub fn weighted_arm_ecdf(
    y: &[f64],
    a: &[u8],
    arm: u8,
    w: Option<&[f64]>,
    scale: Option<f64>,
) -> LinearCdf {
    let mut c: Vec<f64> = (0..y.len())
        .map(|i| if a[i] == arm { weight(w, i) } else { 0.0 })
        .collect();
    let total = scale.unwrap_or_else(|| c.iter().sum::<f64>());
    for v in &mut c {
        *v /= total;
    }
    LinearCdf::step(y, &c)
}

/// Normalized inverse-probability-weighted CDF of `Y(arm)`.
pub fn ipw_arm_cdf(y: &[f64], a: &[u8], arm: u8, e: &[f64], w: Option<&[f64]>) -> LinearCdf {
    let ipw: Vec<f64> = (0..y.len())
        .map(|i| {
            let p = if arm == 1 { e[i] } else { 1.0 - e[i] };
            weight(w, i) / p
        })
        .collect();
    weighted_arm_ecdf(y, a, arm, Some(&ipw), None)
}

/// Augmented IPW CDF of `Y(arm)`:
/// `n^-1 sum_i w_i [F_a(q; X_i) + 1(A_i=a)/e_a(X_i) {1(Y_i <= q) - F_a(q; X_i)}]`.
pub fn aipw_arm_cdf(
    y: &[f64],
    a: &[u8],
    arm: u8,
    e: &[f64],
    cond: &CondCdfFit,
    weights: Option<&[f64]>,
) -> LinearCdf {
    let n = y.len() as f64;
    let mut c = vec![0.0; y.len()];
    let mut d = vec![0.0; y.len()];
    for i in 0..y.len() {
        let w = weight(weights, i) / n;
        let p = if arm == 1 { e[i] } else { 1.0 - e[i] };
        let ci = if a[i] == arm { w / p } else { 0.0 };
        c[i] = ci;
        d[i] = w - ci;
    }
    LinearCdf::new(y, &c, Some(cond), &d)
}

/// Normalized odds-weighted control CDF for the treated.
pub fn ipw_qtt_control_cdf(y: &[f64], a: &[u8], e: &[f64], w: Option<&[f64]>) -> LinearCdf {
    let odds: Vec<f64> = (0..y.len())
        .map(|i| weight(w, i) * e[i] / (1.0 - e[i]))
        .collect();
    weighted_arm_ecdf(y, a, 0, Some(&odds), None)
}

/// `n1^-1 sum_i w_i [A_i F_0(q; X_i) + (1 - A_i) e_i/(1 - e_i) {1(Y_i <= q) - F_0(q; X_i)}]`.
pub fn aipw_qtt_control_cdf(
    y: &[f64],
    a: &[u8],
    e: &[f64],
    cond0: &CondCdfFit,
    weights: Option<&[f64]>,
) -> LinearCdf {
    let n1 = a.iter().filter(|&&v| v == 1).count() as f64;
    let mut c = vec![0.0; y.len()];
    let mut d = vec![0.0; y.len()];
    for i in 0..y.len() {
        let w = weight(weights, i) / n1;
        if a[i] == 1 {
            d[i] = w;
        } else {
            c[i] = w * e[i] / (1.0 - e[i]);
            d[i] = -c[i];
        }
    }
    LinearCdf::new(y, &c, Some(cond0), &d)
}

/// Initial and corrected matched CDF at `q`, in imputation form: the
/// initial value averages observed indicators and donor-imputed ones; the
/// correction adds `F_a(q; S_query) - mean_j F_a(q; S_j)` per query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfEvaluation {
    pub q: f64,
    pub initial: f64,
    pub corrected: f64,
}

/// `map` has donors in arm `cond.arm`.
pub fn dsm_cdf(q: f64, y: &[f64], a: &[u8], map: &MatchMap, cond: &CondCdfFit) -> CdfEvaluation {
    let n = y.len() as f64;
    let m = map.m as f64;
    let ind = |i: usize| if y[i] <= q { 1.0 } else { 0.0 };
    let mut initial = (0..y.len()).filter(|&i| a[i] == cond.arm).map(ind).sum::<f64>();
    let mut correction = 0.0;
    for (qi, js) in map.queries.iter().zip(&map.matches) {
        initial += js.iter().map(|&j| ind(j)).sum::<f64>() / m;
        let donors = js.iter().map(|&j| cond.eval(q, j)).sum::<f64>() / m;
        correction += cond.eval(q, *qi) - donors;
    }
    CdfEvaluation {
        q,
        initial: initial / n,
        corrected: (initial + correction) / n,
    }
}

fn warn_unattained(q: &Quantile, what: &str, xi: f64) {
    if !q.attained {
        warn!("{what}: level {xi} not reached on the grid; using the largest grid point");
    }
}

fn arm_outcomes(dataset: &Dataset, arm: u8) -> Vec<f64> {
    dataset.arm_indices(arm).iter().map(|&i| dataset.y()[i]).collect()
}

/// De-biased DSM quantile treatment effects at each level in `xi`.
pub fn dsm_qte(
    dataset: &Dataset,
    scores: &ScoreSet,
    xi: &[f64],
    m: usize,
    degree: usize,
    boxcox: Option<f64>,
) -> Result<Vec<PointEstimate>> {
    let a = dataset.a();
    let y = dataset.y();
    let ones = vec![1.0; dataset.n()];
    let map0 = match_group(&scores.s0, a, 0, m)?;
    let map1 = match_group(&scores.s1, a, 1, m)?;
    let k = donor_k_over_m(&[&map0, &map1], dataset.n());
    let mut cdfs = Vec::new();
    let mut grids = Vec::new();
    for arm in [0u8, 1] {
        let cond = fit_conditional_cdf(scores, dataset, arm, degree, boxcox, &ones)?;
        cdfs.push(dsm_arm_cdf(y, a, arm, &k, &cond, None));
        grids.push(inversion_grid(&arm_outcomes(dataset, arm)));
    }
    Ok(xi
        .iter()
        .map(|&x| {
            let q0 = cdfs[0].quantile(x, &grids[0]);
            let q1 = cdfs[1].quantile(x, &grids[1]);
            warn_unattained(&q0, "arm 0 quantile", x);
            warn_unattained(&q1, "arm 1 quantile", x);
            PointEstimate {
                value: q1.value - q0.value,
                estimator_tag: "dsm".into(),
                initial: None,
                bias_correction: None,
            }
        })
        .collect())
}

/// De-biased DSM quantile effects on the treated at each level in `xi`.
pub fn dsm_qtt(
    dataset: &Dataset,
    scores: &ScoreSet,
    xi: &[f64],
    m: usize,
    degree: usize,
    boxcox: Option<f64>,
) -> Result<Vec<PointEstimate>> {
    let a = dataset.a();
    let y = dataset.y();
    let ones = vec![1.0; dataset.n()];
    let map0 = match_group(&scores.s0, a, 0, m)?;
    let k = donor_k_over_m(&[&map0], dataset.n());
    let cond0 = fit_conditional_cdf(scores, dataset, 0, degree, boxcox, &ones)?;
    let f0 = qtt_control_cdf(y, a, &k, &cond0, None);
    let f1 = weighted_arm_ecdf(y, a, 1, None, None);
    let g0 = inversion_grid(&arm_outcomes(dataset, 0));
    let g1 = inversion_grid(&arm_outcomes(dataset, 1));
    Ok(xi
        .iter()
        .map(|&x| {
            let q0 = f0.quantile(x, &g0);
            let q1 = f1.quantile(x, &g1);
            warn_unattained(&q0, "matched control quantile", x);
            PointEstimate {
                value: q1.value - q0.value,
                estimator_tag: "dsm".into(),
                initial: None,
                bias_correction: None,
            }
        })
        .collect())
}
