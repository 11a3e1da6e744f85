//! Candidate propensity and prognostic models, their stacked estimating
//! equation, and the per-arm matching matrices built from them.
//!
//! With `J` propensity candidates and `K` prognostic candidates, the
//! matching matrix for arm `a` has `J + K` columns: the logit of each fitted
//! propensity followed by each fitted arm-`a` outcome mean, evaluated for
//! every unit and standardized with full-sample constants.

use log::warn;
use nalgebra::DMatrix;

use crate::data::{Dataset, StandardizationParams};
use crate::design::{build_design, FeatureMap};
use crate::error::{DsmError, Result};
use crate::linalg::{mat_vec, weighted_lstsq, weighted_lstsq_rows};
use crate::stats::{expit, logit};

/// Fitted propensities are clipped to `[CLIP, 1 - CLIP]` before any logit
/// or inverse weighting.
pub const PROPENSITY_CLIP: f64 = 1e-6;
pub const IRLS_MAX_ITER: usize = 100;
pub const IRLS_TOL: f64 = 1e-8;

/// Linear predictors beyond this magnitude round the fitted probability to
/// exactly 0 or 1; IRLS treats that as separation.
const SEPARATION_ETA: f64 = 36.0;

pub fn clip_propensity(p: f64) -> f64 {
    p.clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)
}

/// Propensity and (paired) prognostic candidates, by feature map.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CandidateModels {
    pub propensity: Vec<FeatureMap>,
    pub prognostic: Vec<FeatureMap>,
}

impl CandidateModels {
    pub fn new(propensity: Vec<FeatureMap>, prognostic: Vec<FeatureMap>) -> Self {
        CandidateModels {
            propensity,
            prognostic,
        }
    }

    pub fn feature_maps(&self) -> Vec<FeatureMap> {
        let mut out: Vec<FeatureMap> = Vec::new();
        for &m in self.propensity.iter().chain(&self.prognostic) {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }
}

/// Design matrices for each feature map used by a candidate set.
#[derive(Debug, Clone)]
pub struct DesignCache {
    entries: Vec<(FeatureMap, DMatrix<f64>)>,
}

impl DesignCache {
    pub fn build(dataset: &Dataset, candidates: &CandidateModels) -> Result<Self> {
        let entries = candidates
            .feature_maps()
            .into_iter()
            .map(|m| build_design(dataset, m).map(|d| (m, d)))
            .collect::<Result<_>>()?;
        Ok(DesignCache { entries })
    }

    pub fn get(&self, map: FeatureMap) -> &DMatrix<f64> {
        &self
            .entries
            .iter()
            .find(|(m, _)| *m == map)
            .expect("design cache built for this candidate set")
            .1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub alpha: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticFit {
    /// Fitted probabilities (unclipped).
    pub fn probabilities(&self, design: &DMatrix<f64>) -> Vec<f64> {
        mat_vec(design, &self.alpha).into_iter().map(expit).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub beta: Vec<f64>,
    pub sigma: f64,
}

impl LinearFit {
    pub fn predict(&self, design: &DMatrix<f64>) -> Vec<f64> {
        mat_vec(design, &self.beta)
    }
}

pub fn fit_logistic(design: &DMatrix<f64>, a: &[u8], weights: &[f64]) -> Result<LogisticFit> {
    fit_logistic_from(design, a, weights, None)
}

/// Weighted logistic regression by iteratively reweighted least squares,
/// optionally warm-started. Non-convergence is reported through the flag,
/// not as an error; the last iterate is returned.
pub fn fit_logistic_from(
    design: &DMatrix<f64>,
    a: &[u8],
    weights: &[f64],
    start: Option<&[f64]>,
) -> Result<LogisticFit> {
    let (n, p) = design.shape();
    if a.len() != n || weights.len() != n {
        return Err(DsmError::Dimension {
            expected: n,
            got: a.len().min(weights.len()),
        });
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(DsmError::Domain("weights sum to zero".into()));
    }
    let mut alpha = match start {
        Some(s) if s.len() == p => s.to_vec(),
        Some(s) => {
            return Err(DsmError::Dimension {
                expected: p,
                got: s.len(),
            })
        }
        None => vec![0.0; p],
    };
    let rows: Vec<usize> = (0..n).filter(|&i| weights[i] > 0.0).collect();
    let mut work_w = vec![0.0; n];
    let mut work_z = vec![0.0; n];

    for iter in 1..=IRLS_MAX_ITER {
        let eta = mat_vec(design, &alpha);
        if eta.iter().any(|e| e.abs() > SEPARATION_ETA) {
            return Ok(LogisticFit {
                alpha,
                converged: false,
                iterations: iter - 1,
            });
        }
        for &i in &rows {
            let pi = expit(eta[i]);
            let v = pi * (1.0 - pi);
            work_w[i] = weights[i] * v;
            work_z[i] = eta[i] + (f64::from(a[i]) - pi) / v;
        }
        let sol = weighted_lstsq_rows(design, &work_z, &work_w, &rows);
        if !sol.is_full_rank() {
            if iter == 1 {
                return Err(DsmError::RankDeficient {
                    columns: sol.dropped,
                });
            }
            return Ok(LogisticFit {
                alpha,
                converged: false,
                iterations: iter,
            });
        }
        let change = sol
            .coef
            .iter()
            .zip(&alpha)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        alpha = sol.coef;
        if !change.is_finite() {
            return Ok(LogisticFit {
                alpha,
                converged: false,
                iterations: iter,
            });
        }
        if change < IRLS_TOL {
            return Ok(LogisticFit {
                alpha,
                converged: true,
                iterations: iter,
            });
        }
    }
    Ok(LogisticFit {
        alpha,
        converged: false,
        iterations: IRLS_MAX_ITER,
    })
}

/// Weighted least squares on the rows selected by `mask`.
pub fn fit_linear(
    design: &DMatrix<f64>,
    y: &[f64],
    mask: &[bool],
    weights: &[f64],
) -> Result<LinearFit> {
    let n = design.nrows();
    if y.len() != n || mask.len() != n || weights.len() != n {
        return Err(DsmError::Dimension {
            expected: n,
            got: y.len().min(mask.len()).min(weights.len()),
        });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i] && weights[i] > 0.0).collect();
    if rows.is_empty() {
        return Err(DsmError::Domain("linear fit mask selects no rows".into()));
    }
    let sol = weighted_lstsq_rows(design, y, weights, &rows);
    if !sol.is_full_rank() {
        return Err(DsmError::RankDeficient {
            columns: sol.dropped,
        });
    }
    let fitted = mat_vec(design, &sol.coef);
    let mut rss = 0.0;
    let mut wsum = 0.0;
    for &i in &rows {
        let r = y[i] - fitted[i];
        rss += weights[i] * r * r;
        wsum += weights[i];
    }
    let dof = wsum - sol.rank as f64;
    let sigma = if dof > 0.0 { (rss / dof).sqrt() } else { 0.0 };
    Ok(LinearFit {
        beta: sol.coef,
        sigma,
    })
}

/// All fitted coefficients, in stacked order: `J` propensity blocks, then
/// `K` arm-0 prognostic blocks, then `K` arm-1 prognostic blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub alpha: Vec<Vec<f64>>,
    pub beta0: Vec<Vec<f64>>,
    pub beta1: Vec<Vec<f64>>,
}

impl Theta {
    pub fn flatten(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .chain(&self.beta0)
            .chain(&self.beta1)
            .flat_map(|b| b.iter().copied())
            .collect()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.alpha
            .iter()
            .chain(&self.beta0)
            .chain(&self.beta1)
            .map(Vec::len)
            .collect()
    }
}

fn stacked_dims(designs: &DesignCache, candidates: &CandidateModels) -> Vec<usize> {
    let ps = candidates.propensity.iter().map(|&m| designs.get(m).ncols());
    let pg: Vec<usize> = candidates
        .prognostic
        .iter()
        .map(|&m| designs.get(m).ncols())
        .collect();
    ps.chain(pg.iter().copied()).chain(pg.iter().copied()).collect()
}

/// `n^{-1/2} sum_i w_i U_i(theta)` for the stacked logistic and masked
/// least-squares scores, evaluated at a flat coefficient vector.
pub fn stacked_estimating_equation(
    theta: &[f64],
    dataset: &Dataset,
    designs: &DesignCache,
    candidates: &CandidateModels,
    weights: &[f64],
) -> Result<Vec<f64>> {
    let dims = stacked_dims(designs, candidates);
    let total: usize = dims.iter().sum();
    if theta.len() != total {
        return Err(DsmError::Dimension {
            expected: total,
            got: theta.len(),
        });
    }
    let n = dataset.n();
    if weights.len() != n {
        return Err(DsmError::Dimension {
            expected: n,
            got: weights.len(),
        });
    }
    let scale = 1.0 / (n as f64).sqrt();
    let a = dataset.a();
    let y = dataset.y();
    let mut out = Vec::with_capacity(total);
    let mut offset = 0;

    for &map in &candidates.propensity {
        let d = designs.get(map);
        let coef = &theta[offset..offset + d.ncols()];
        let eta = mat_vec(d, coef);
        let resid: Vec<f64> = (0..n)
            .map(|i| weights[i] * (f64::from(a[i]) - expit(eta[i])))
            .collect();
        out.extend(d.tr_mul(&nalgebra::DVector::from_vec(resid)).iter().map(|v| v * scale));
        offset += d.ncols();
    }
    for arm in [0u8, 1u8] {
        for &map in &candidates.prognostic {
            let d = designs.get(map);
            let coef = &theta[offset..offset + d.ncols()];
            let fit = mat_vec(d, coef);
            let resid: Vec<f64> = (0..n)
                .map(|i| {
                    if a[i] == arm {
                        weights[i] * (y[i] - fit[i])
                    } else {
                        0.0
                    }
                })
                .collect();
            out.extend(d.tr_mul(&nalgebra::DVector::from_vec(resid)).iter().map(|v| v * scale));
            offset += d.ncols();
        }
    }
    Ok(out)
}

/// Every candidate model fitted with one set of unit weights, with the raw
/// (unstandardized) score columns they induce.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub candidates: CandidateModels,
    pub propensity: Vec<LogisticFit>,
    pub prognostic0: Vec<LinearFit>,
    pub prognostic1: Vec<LinearFit>,
    /// Clipped fitted propensities, one vector per propensity candidate.
    pub e_hat: Vec<Vec<f64>>,
    pub logit_e: Vec<Vec<f64>>,
    /// Fitted arm-0 / arm-1 means for all units, one vector per candidate.
    pub psi0: Vec<Vec<f64>>,
    pub psi1: Vec<Vec<f64>>,
}

impl FittedModels {
    pub fn fit(
        dataset: &Dataset,
        designs: &DesignCache,
        candidates: &CandidateModels,
        weights: &[f64],
        warm: Option<&FittedModels>,
    ) -> Result<Self> {
        let mut propensity = Vec::new();
        let mut e_hat = Vec::new();
        let mut logit_e = Vec::new();
        for (j, &map) in candidates.propensity.iter().enumerate() {
            let d = designs.get(map);
            let start = warm.map(|w| w.propensity[j].alpha.as_slice());
            let fit = fit_logistic_from(d, dataset.a(), weights, start)?;
            if !fit.converged && warm.is_none() {
                warn!(
                    "propensity model {} ({map}) did not converge after {} iterations; using last iterate",
                    j + 1,
                    fit.iterations
                );
            }
            let probs: Vec<f64> = fit
                .probabilities(d)
                .into_iter()
                .map(clip_propensity)
                .collect();
            logit_e.push(probs.iter().map(|&p| logit(p)).collect());
            e_hat.push(probs);
            propensity.push(fit);
        }

        let mut prognostic0 = Vec::new();
        let mut prognostic1 = Vec::new();
        let mut psi0 = Vec::new();
        let mut psi1 = Vec::new();
        for &map in &candidates.prognostic {
            let d = designs.get(map);
            for arm in [0u8, 1u8] {
                let mask: Vec<bool> = dataset.a().iter().map(|&v| v == arm).collect();
                let fit = fit_linear(d, dataset.y(), &mask, weights)?;
                let pred = fit.predict(d);
                if arm == 0 {
                    psi0.push(pred);
                    prognostic0.push(fit);
                } else {
                    psi1.push(pred);
                    prognostic1.push(fit);
                }
            }
        }
        Ok(FittedModels {
            candidates: candidates.clone(),
            propensity,
            prognostic0,
            prognostic1,
            e_hat,
            logit_e,
            psi0,
            psi1,
        })
    }

    pub fn all_converged(&self) -> bool {
        self.propensity.iter().all(|f| f.converged)
    }

    pub fn theta(&self) -> Theta {
        Theta {
            alpha: self.propensity.iter().map(|f| f.alpha.clone()).collect(),
            beta0: self.prognostic0.iter().map(|f| f.beta.clone()).collect(),
            beta1: self.prognostic1.iter().map(|f| f.beta.clone()).collect(),
        }
    }
}

/// Per-arm matching matrices.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub s0: DMatrix<f64>,
    pub s1: DMatrix<f64>,
    pub std0: StandardizationParams,
    pub std1: StandardizationParams,
    /// Number of leading propensity columns.
    pub n_propensity: usize,
    pub theta: Option<Theta>,
}

impl ScoreSet {
    pub fn dim(&self) -> usize {
        self.s0.ncols()
    }

    pub fn arm(&self, arm: u8) -> &DMatrix<f64> {
        if arm == 0 {
            &self.s0
        } else {
            &self.s1
        }
    }

    /// Standardizes raw per-arm matrices with their own full-sample
    /// constants. A constant column is centred and left at zero.
    pub fn from_raw(raw0: DMatrix<f64>, raw1: DMatrix<f64>, n_propensity: usize) -> Result<Self> {
        let std0 = score_moments(&raw0)?;
        let std1 = score_moments(&raw1)?;
        Self::from_raw_fixed(raw0, raw1, n_propensity, std0, std1)
    }

    /// Standardizes with given constants (used for bootstrap refits so the
    /// metric stays that of the point estimate).
    pub fn from_raw_fixed(
        raw0: DMatrix<f64>,
        raw1: DMatrix<f64>,
        n_propensity: usize,
        std0: StandardizationParams,
        std1: StandardizationParams,
    ) -> Result<Self> {
        if raw0.shape() != raw1.shape() {
            return Err(DsmError::Dimension {
                expected: raw0.ncols(),
                got: raw1.ncols(),
            });
        }
        if raw0.ncols() == 0 {
            return Err(DsmError::Domain(
                "at least one propensity or prognostic model is required".into(),
            ));
        }
        if raw0.iter().chain(raw1.iter()).any(|v| !v.is_finite()) {
            return Err(DsmError::NonFinite("score columns".into()));
        }
        let s0 = std0.apply(&raw0)?;
        let s1 = std1.apply(&raw1)?;
        Ok(ScoreSet {
            s0,
            s1,
            std0,
            std1,
            n_propensity,
            theta: None,
        })
    }

    /// Selects propensity candidates `ps` and prognostic candidates `pg`
    /// from a fitted pool.
    pub fn from_models(
        models: &FittedModels,
        ps: &[usize],
        pg: &[usize],
        fixed: Option<(&StandardizationParams, &StandardizationParams)>,
    ) -> Result<Self> {
        let (raw0, raw1) = raw_scores(models, ps, pg)?;
        let mut set = match fixed {
            Some((a, b)) => Self::from_raw_fixed(raw0, raw1, ps.len(), a.clone(), b.clone())?,
            None => Self::from_raw(raw0, raw1, ps.len())?,
        };
        let theta = models.theta();
        set.theta = Some(Theta {
            alpha: ps.iter().map(|&j| theta.alpha[j].clone()).collect(),
            beta0: pg.iter().map(|&k| theta.beta0[k].clone()).collect(),
            beta1: pg.iter().map(|&k| theta.beta1[k].clone()).collect(),
        });
        Ok(set)
    }
}

/// Raw (logit propensity, prognostic) columns for a selection of candidates.
pub fn raw_scores(
    models: &FittedModels,
    ps: &[usize],
    pg: &[usize],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = models
        .logit_e
        .first()
        .or(models.psi0.first())
        .map(Vec::len)
        .unwrap_or(0);
    let d = ps.len() + pg.len();
    if d == 0 {
        return Err(DsmError::Domain(
            "at least one propensity or prognostic model is required".into(),
        ));
    }
    let mut raw0 = DMatrix::zeros(n, d);
    let mut raw1 = DMatrix::zeros(n, d);
    for (c, &j) in ps.iter().enumerate() {
        raw0.column_mut(c).copy_from_slice(&models.logit_e[j]);
        raw1.column_mut(c).copy_from_slice(&models.logit_e[j]);
    }
    for (c, &k) in pg.iter().enumerate() {
        raw0.column_mut(ps.len() + c).copy_from_slice(&models.psi0[k]);
        raw1.column_mut(ps.len() + c).copy_from_slice(&models.psi1[k]);
    }
    Ok((raw0, raw1))
}

fn score_moments(raw: &DMatrix<f64>) -> Result<StandardizationParams> {
    let n = raw.nrows();
    if n < 2 {
        return Err(DsmError::Domain("need at least two units".into()));
    }
    let mut means = Vec::new();
    let mut sds = Vec::new();
    for (j, col) in raw.column_iter().enumerate() {
        let m = col.iter().sum::<f64>() / n as f64;
        let ss: f64 = col.iter().map(|x| (x - m) * (x - m)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        means.push(m);
        if sd > 1e-14 * m.abs().max(1e-300) {
            sds.push(sd);
        } else {
            warn!("score column {j} is constant; it adds no distance to matching");
            sds.push(1.0);
        }
    }
    Ok(StandardizationParams { means, sds })
}

/// Fits the given candidates with `weights` and assembles standardized
/// matching matrices using all of them.
pub fn compute_scores(
    dataset: &Dataset,
    candidates: &CandidateModels,
    weights: &[f64],
) -> Result<ScoreSet> {
    let designs = DesignCache::build(dataset, candidates)?;
    let models = FittedModels::fit(dataset, &designs, candidates, weights, None)?;
    let ps: Vec<usize> = (0..candidates.propensity.len()).collect();
    let pg: Vec<usize> = (0..candidates.prognostic.len()).collect();
    ScoreSet::from_models(&models, &ps, &pg, None)
}

/// Rank check used by callers that want the collinear columns named before
/// fitting.
pub fn design_rank_deficiency(design: &DMatrix<f64>, weights: &[f64]) -> Vec<usize> {
    let zeros = vec![0.0; design.nrows()];
    weighted_lstsq(design, &zeros, weights).dropped
}
