//! Estimator selection and evaluation.
//!
//! An [`EstimatorSpec`] names a method and the subset of a candidate pool it
//! uses. Fitting it on a dataset gives a [`FittedEstimator`], which holds
//! everything a bootstrap replicate must keep fixed (match counts, score
//! standardization constants) and re-evaluates the estimator under new unit
//! weights and refitted candidate models.

use crate::config::{Estimand, Method};
use crate::data::Dataset;
use crate::error::{DsmError, Result};
use crate::matching::match_group;
use crate::mean::{
    aipw_ate, aipw_att, att_linear_form, ate_linear_form, donor_k_over_m, dsm_ate_bias_correction,
    dsm_ate_initial, dsm_att_bias_correction, dsm_att_initial, ipw_ate, ipw_att, naive_ate,
};
use crate::models::{FittedModels, ScoreSet};
use crate::quantile::{
    aipw_arm_cdf, aipw_qtt_control_cdf, dsm_arm_cdf, inversion_grid, ipw_arm_cdf,
    ipw_qtt_control_cdf, qtt_control_cdf, transformed_outcome, weighted_arm_ecdf, CondCdfFit,
    LinearCdf, Quantile,
};
use crate::sieve::{fit_sieve, SieveFit};

/// Method plus the propensity (`ps`) and prognostic (`pg`) candidates it
/// uses, as indices into the candidate pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimatorSpec {
    pub method: Method,
    pub ps: Vec<usize>,
    pub pg: Vec<usize>,
    pub tag: String,
}

impl EstimatorSpec {
    /// Parses simulation tags: `naive`, `m.x` (or `mx`), or a method name
    /// followed by four 0/1 digits selecting (e1, e2, mu1, mu2), where
    /// candidate 1 uses the correct design and candidate 2 the raw one.
    pub fn parse_tag(tag: &str) -> Result<Self> {
        let bad = || DsmError::Config(format!("invalid estimator tag '{tag}'"));
        let spec = match tag {
            "naive" => EstimatorSpec::new(Method::Naive, vec![], vec![]),
            "m.x" | "mx" => EstimatorSpec::new(Method::MatchX, vec![], vec![]),
            _ => {
                let split = tag.len().checked_sub(4).ok_or_else(bad)?;
                if !tag.is_char_boundary(split) {
                    return Err(bad());
                }
                let (name, digits) = tag.split_at(split);
                let method = match name {
                    "dsm" => Method::Dsm,
                    "psm" => Method::Psm,
                    "pgm" => Method::Pgm,
                    "ipw" => Method::Ipw,
                    "aipw" => Method::Aipw,
                    _ => return Err(bad()),
                };
                let bits: Vec<bool> = digits
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        _ => Err(bad()),
                    })
                    .collect::<Result<_>>()?;
                let ps = (0..2).filter(|&j| bits[j]).collect();
                let pg = (0..2).filter(|&k| bits[2 + k]).collect();
                EstimatorSpec::new(method, ps, pg)
            }
        };
        spec.validate().map_err(|e| DsmError::Config(format!("estimator tag '{tag}': {e}")))?;
        Ok(spec)
    }

    /// Uses every candidate of the pool.
    pub fn all_candidates(method: Method, n_ps: usize, n_pg: usize) -> Result<Self> {
        let (ps, pg) = match method {
            Method::Naive | Method::MatchX => (vec![], vec![]),
            Method::Psm | Method::Ipw => ((0..n_ps).collect(), vec![]),
            Method::Pgm => (vec![], (0..n_pg).collect()),
            Method::Dsm | Method::Aipw => ((0..n_ps).collect(), (0..n_pg).collect()),
        };
        let mut spec = EstimatorSpec::new(method, ps, pg);
        spec.tag = format!(
            "{}{}{}",
            method.name(),
            "1".repeat(spec.ps.len()),
            "1".repeat(spec.pg.len())
        );
        spec.validate()?;
        Ok(spec)
    }

    fn new(method: Method, ps: Vec<usize>, pg: Vec<usize>) -> Self {
        let tag = match method {
            Method::Naive | Method::MatchX => method.name().to_string(),
            _ => {
                let bit = |v: &Vec<usize>, i| if v.contains(&i) { '1' } else { '0' };
                format!(
                    "{}{}{}{}{}",
                    method.name(),
                    bit(&ps, 0),
                    bit(&ps, 1),
                    bit(&pg, 0),
                    bit(&pg, 1)
                )
            }
        };
        EstimatorSpec { method, ps, pg, tag }
    }

    pub fn validate(&self) -> Result<()> {
        let (j, k) = (self.ps.len(), self.pg.len());
        let ok = match self.method {
            Method::Dsm => j + k >= 1,
            Method::Psm | Method::Ipw => j == 1 && k == 0,
            Method::Pgm => j == 0 && k == 1,
            Method::Aipw => j == 1 && k == 1,
            Method::Naive | Method::MatchX => j == 0 && k == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(DsmError::Config(format!(
                "{} cannot use {j} propensity and {k} prognostic models",
                self.method.name()
            )))
        }
    }

    pub fn is_matching(&self) -> bool {
        matches!(
            self.method,
            Method::Dsm | Method::Psm | Method::Pgm | Method::MatchX
        )
    }
}

/// Options shared by every estimator evaluated on one dataset.
#[derive(Debug, Clone)]
pub struct EstimationOptions {
    pub estimand: Estimand,
    pub m: usize,
    pub sieve_degree: usize,
    pub boxcox: Option<f64>,
    /// Reuse the point-estimate sieve coefficients in replicates.
    pub freeze_sieve: bool,
}

/// Matching state frozen at the point estimate.
#[derive(Debug, Clone)]
struct MatchedState {
    /// `K/M` per unit from the original match maps.
    k_over_m: Vec<f64>,
    scores: ScoreSet,
    degree: usize,
    sieve0: SieveFit,
    sieve1: Option<SieveFit>,
}

#[derive(Debug, Clone)]
pub struct FittedEstimator {
    pub spec: EstimatorSpec,
    pub options: EstimationOptions,
    /// One value for ATE/ATT, one per level for QTE/QTT.
    pub values: Vec<f64>,
    /// Initial estimate and bias correction for matched ATE/ATT.
    pub components: Option<(f64, f64)>,
    /// Levels whose quantile was not reached on the grid.
    pub unattained: Vec<f64>,
    grids: [Vec<f64>; 2],
    matched: Option<MatchedState>,
}

fn arm_grid(dataset: &Dataset, arm: u8) -> Vec<f64> {
    let y: Vec<f64> = dataset
        .arm_indices(arm)
        .iter()
        .map(|&i| dataset.y()[i])
        .collect();
    inversion_grid(&y)
}

fn matching_scores(spec: &EstimatorSpec, dataset: &Dataset, pool: &FittedModels) -> Result<ScoreSet> {
    match spec.method {
        Method::MatchX => {
            let x = dataset.x().clone();
            ScoreSet::from_raw(x.clone(), x, 0)
        }
        _ => ScoreSet::from_models(pool, &spec.ps, &spec.pg, None),
    }
}

/// Outcome fits on the matching scores: sieve means, or the normal-linear
/// CDF model on the (optionally transformed) outcome.
fn outcome_sieve(
    scores: &ScoreSet,
    dataset: &Dataset,
    arm: u8,
    degree: usize,
    boxcox: Option<f64>,
    quantile: bool,
    w: &[f64],
) -> Result<SieveFit> {
    let h = if quantile {
        transformed_outcome(dataset, arm, boxcox)?
    } else {
        dataset.y().to_vec()
    };
    fit_sieve(scores.arm(arm), &h, &dataset.arm_indices(arm), w, degree)
}

/// Frozen-coefficient variant: the point fit evaluated at new scores.
fn refrozen(fit: &SieveFit, s: &nalgebra::DMatrix<f64>) -> SieveFit {
    let mut out = fit.clone();
    out.fitted = fit.predict(s);
    out
}

impl FittedEstimator {
    /// Point estimate with unit weights on `pool`, the candidate models
    /// fitted to `dataset`.
    pub fn fit(
        spec: &EstimatorSpec,
        dataset: &Dataset,
        pool: &FittedModels,
        options: &EstimationOptions,
    ) -> Result<Self> {
        spec.validate()?;
        let grids = [arm_grid(dataset, 0), arm_grid(dataset, 1)];
        let mut est = FittedEstimator {
            spec: spec.clone(),
            options: options.clone(),
            values: Vec::new(),
            components: None,
            unattained: Vec::new(),
            grids,
            matched: None,
        };
        let ones = vec![1.0; dataset.n()];
        if spec.is_matching() {
            let scores = matching_scores(spec, dataset, pool)?;
            let degree = if spec.method == Method::MatchX {
                1
            } else {
                options.sieve_degree
            };
            let a = dataset.a();
            let y = dataset.y();
            let treated_only = options.estimand.is_treated_only();
            let quantile = !options.estimand.xi().is_empty();
            let map0 = match_group(&scores.s0, a, 0, options.m)?;
            let map1 = if treated_only {
                None
            } else {
                Some(match_group(&scores.s1, a, 1, options.m)?)
            };
            let k_over_m = match &map1 {
                Some(m1) => donor_k_over_m(&[&map0, m1], dataset.n()),
                None => donor_k_over_m(&[&map0], dataset.n()),
            };
            let sieve0 = outcome_sieve(&scores, dataset, 0, degree, options.boxcox, quantile, &ones)?;
            let sieve1 = if treated_only {
                None
            } else {
                Some(outcome_sieve(&scores, dataset, 1, degree, options.boxcox, quantile, &ones)?)
            };
            for (arm, fit) in [(0u8, Some(&sieve0)), (1u8, sieve1.as_ref())] {
                if let Some(f) = fit {
                    if !f.dropped.is_empty() {
                        log::warn!(
                            "{}: sieve for arm {arm} dropped collinear terms {:?}",
                            spec.tag,
                            f.dropped_names()
                        );
                    }
                    if f.sigma_floored && quantile {
                        log::warn!("{}: zero residual variance in arm {arm}; sigma floored", spec.tag);
                    }
                }
            }
            match &options.estimand {
                Estimand::Ate => {
                    let m1 = map1.as_ref().expect("ATE matches both arms");
                    let s1 = sieve1.as_ref().expect("ATE fits both arms");
                    let initial = dsm_ate_initial(y, a, &map0, m1);
                    let corr = dsm_ate_bias_correction(&map0, m1, &sieve0.fitted, &s1.fitted);
                    est.components = Some((initial, corr));
                    est.values = vec![initial - corr];
                }
                Estimand::Att => {
                    let initial = dsm_att_initial(y, &map0);
                    let corr = dsm_att_bias_correction(&map0, &sieve0.fitted);
                    est.components = Some((initial, corr));
                    est.values = vec![initial - corr];
                }
                _ => {}
            }
            est.matched = Some(MatchedState {
                k_over_m,
                scores,
                degree,
                sieve0,
                sieve1,
            });
            if !options.estimand.xi().is_empty() {
                let (values, unattained) = est.evaluate(dataset, pool, None, true)?;
                est.values = values;
                est.unattained = unattained;
            }
        } else {
            let (values, unattained) = est.evaluate(dataset, pool, None, true)?;
            est.values = values;
            est.unattained = unattained;
        }
        Ok(est)
    }

    /// Replicate under unit weights `w` and candidate models `pool` refitted
    /// with those weights. Match counts stay those of the point estimate.
    pub fn replicate(&self, dataset: &Dataset, pool: &FittedModels, w: &[f64]) -> Result<Vec<f64>> {
        if self.spec.ps.iter().any(|&j| !pool.propensity[j].converged) {
            return Err(DsmError::Numerical(
                "propensity refit did not converge".into(),
            ));
        }
        self.evaluate(dataset, pool, Some(w), false).map(|(v, _)| v)
    }

    /// Linear-form evaluation. With `point` set, the point-estimate fits are
    /// reused as they are.
    fn evaluate(
        &self,
        dataset: &Dataset,
        pool: &FittedModels,
        w: Option<&[f64]>,
        point: bool,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let y = dataset.y();
        let a = dataset.a();
        let xi = self.options.estimand.xi().to_vec();
        let mut unattained = Vec::new();
        let mut invert = |f: &LinearCdf, arm: usize, x: f64| -> f64 {
            let q: Quantile = f.quantile(x, &self.grids[arm]);
            if !q.attained {
                unattained.push(x);
            }
            q.value
        };

        let values = match &self.matched {
            Some(st) => {
                let (s0, s1);
                let (fit0, fit1) = if point {
                    (st.sieve0.clone(), st.sieve1.clone())
                } else {
                    let scores = if self.spec.method == Method::MatchX {
                        st.scores.clone()
                    } else {
                        ScoreSet::from_models(
                            pool,
                            &self.spec.ps,
                            &self.spec.pg,
                            Some((&st.scores.std0, &st.scores.std1)),
                        )?
                    };
                    s0 = scores.s0.clone();
                    s1 = scores.s1.clone();
                    let quantile = !xi.is_empty();
                    let ww = w.expect("replicates carry weights");
                    if self.options.freeze_sieve {
                        (
                            refrozen(&st.sieve0, &s0),
                            st.sieve1.as_ref().map(|f| refrozen(f, &s1)),
                        )
                    } else {
                        let b = self.options.boxcox;
                        let f0 = outcome_sieve(&scores, dataset, 0, st.degree, b, quantile, ww)?;
                        let f1 = match st.sieve1 {
                            Some(_) => Some(outcome_sieve(
                                &scores, dataset, 1, st.degree, b, quantile, ww,
                            )?),
                            None => None,
                        };
                        (f0, f1)
                    }
                };
                let k = &st.k_over_m;
                match &self.options.estimand {
                    Estimand::Ate => {
                        let f1 = fit1.as_ref().expect("ATE fits both arms");
                        vec![ate_linear_form(y, a, k, &fit0.fitted, &f1.fitted, w)]
                    }
                    Estimand::Att => vec![att_linear_form(y, a, k, &fit0.fitted, w)],
                    Estimand::Qte { .. } => {
                        let b = self.options.boxcox;
                        let c0 = CondCdfFit::from_sieve(0, &fit0, b);
                        let c1 = CondCdfFit::from_sieve(1, fit1.as_ref().expect("both arms"), b);
                        let f0 = dsm_arm_cdf(y, a, 0, k, &c0, w);
                        let f1 = dsm_arm_cdf(y, a, 1, k, &c1, w);
                        xi.iter()
                            .map(|&x| invert(&f1, 1, x) - invert(&f0, 0, x))
                            .collect()
                    }
                    Estimand::Qtt { .. } => {
                        let c0 = CondCdfFit::from_sieve(0, &fit0, self.options.boxcox);
                        let f0 = qtt_control_cdf(y, a, k, &c0, w);
                        let n1 = dataset.arm_size(1) as f64;
                        let f1 = weighted_arm_ecdf(y, a, 1, w, Some(n1));
                        xi.iter()
                            .map(|&x| invert(&f1, 1, x) - invert(&f0, 0, x))
                            .collect()
                    }
                }
            }
            None => self.evaluate_comparator(dataset, pool, w, &xi, &mut invert)?,
        };
        Ok((values, unattained))
    }

    fn evaluate_comparator(
        &self,
        dataset: &Dataset,
        pool: &FittedModels,
        w: Option<&[f64]>,
        xi: &[f64],
        invert: &mut impl FnMut(&LinearCdf, usize, f64) -> f64,
    ) -> Result<Vec<f64>> {
        let y = dataset.y();
        let a = dataset.a();
        let e = self.spec.ps.first().map(|&j| &pool.e_hat[j]);
        let pg = self.spec.pg.first().copied();
        let cond = |arm: u8| -> CondCdfFit {
            let k = pg.expect("aipw has a prognostic model");
            if arm == 0 {
                CondCdfFit::from_linear(0, &pool.prognostic0[k], pool.psi0[k].clone())
            } else {
                CondCdfFit::from_linear(1, &pool.prognostic1[k], pool.psi1[k].clone())
            }
        };
        let treated = |w| weighted_arm_ecdf(y, a, 1, w, None);
        Ok(match (self.spec.method, &self.options.estimand) {
            (Method::Naive, Estimand::Ate | Estimand::Att) => vec![naive_ate(y, a, w)],
            (Method::Naive, _) => {
                let f0 = weighted_arm_ecdf(y, a, 0, w, None);
                let f1 = treated(w);
                xi.iter().map(|&x| invert(&f1, 1, x) - invert(&f0, 0, x)).collect()
            }
            (Method::Ipw, Estimand::Ate) => vec![ipw_ate(y, a, e.unwrap(), w)?],
            (Method::Ipw, Estimand::Att) => vec![ipw_att(y, a, e.unwrap(), w)?],
            (Method::Ipw, Estimand::Qte { .. }) => {
                let f0 = ipw_arm_cdf(y, a, 0, e.unwrap(), w);
                let f1 = ipw_arm_cdf(y, a, 1, e.unwrap(), w);
                xi.iter().map(|&x| invert(&f1, 1, x) - invert(&f0, 0, x)).collect()
            }
            (Method::Ipw, Estimand::Qtt { .. }) => {
                let f0 = ipw_qtt_control_cdf(y, a, e.unwrap(), w);
                let f1 = treated(w);
                xi.iter().map(|&x| invert(&f1, 1, x) - invert(&f0, 0, x)).collect()
            }
            (Method::Aipw, Estimand::Ate) => {
                let k = pg.unwrap();
                vec![aipw_ate(y, a, e.unwrap(), &pool.psi0[k], &pool.psi1[k], w)?]
            }
            (Method::Aipw, Estimand::Att) => {
                vec![aipw_att(y, a, e.unwrap(), &pool.psi0[pg.unwrap()], w)?]
            }
            (Method::Aipw, Estimand::Qte { .. }) => {
                let f0 = aipw_arm_cdf(y, a, 0, e.unwrap(), &cond(0), w);
                let f1 = aipw_arm_cdf(y, a, 1, e.unwrap(), &cond(1), w);
                xi.iter().map(|&x| invert(&f1, 1, x) - invert(&f0, 0, x)).collect()
            }
            (Method::Aipw, Estimand::Qtt { .. }) => {
                let f0 = aipw_qtt_control_cdf(y, a, e.unwrap(), &cond(0), w);
                let f1 = treated(w);
                xi.iter().map(|&x| invert(&f1, 1, x) - invert(&f0, 0, x)).collect()
            }
            (m, _) => unreachable!("{} is a matching method", m.name()),
        })
    }
}
