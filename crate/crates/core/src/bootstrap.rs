//! Weighted bootstrap with match counts frozen at the point estimate.
//!
//! Each replicate draws unit weights, refits every candidate model with
//! them, recomputes the matching scores in the original metric, and
//! re-evaluates each estimator's linear form. Matches are never redone.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BootstrapConfig, WeightScheme};
use crate::data::Dataset;
use crate::error::Result;
use crate::estimator::FittedEstimator;
use crate::models::{DesignCache, FittedModels};
use crate::rng::{stream, Purpose};

/// Wald critical value for 95% intervals.
pub const Z_95: f64 = 1.96;
/// Share of failed replicates above which inference is flagged.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightDraw {
    pub omega: Vec<f64>,
    pub scheme: WeightScheme,
    pub replicate_id: u64,
}

/// Multinomial weights are resampling counts (mean one, summing to `n`);
/// exponential weights are iid Exp(1).
pub fn draw_weights(n: usize, scheme: WeightScheme, seed: u64, replicate_id: u64) -> WeightDraw {
    let mut rng = stream(seed, replicate_id, Purpose::Weights);
    let omega = match scheme {
        WeightScheme::Multinomial => {
            let mut counts = vec![0.0; n];
            for _ in 0..n {
                counts[rng.gen_range(0..n)] += 1.0;
            }
            counts
        }
        WeightScheme::Exponential => (0..n).map(|_| Exp1.sample(&mut rng)).collect(),
    };
    WeightDraw {
        omega,
        scheme,
        replicate_id,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Successful replicate values in replicate order.
    pub replicates: Vec<f64>,
    pub failures: usize,
    pub unreliable: bool,
}

impl BootstrapResult {
    /// Standard error from the sample sd of successful replicates; failed
    /// replicates are `None`.
    pub fn from_replicates(point: f64, reps: &[Option<f64>]) -> Self {
        let ok: Vec<f64> = reps.iter().flatten().copied().collect();
        let failures = reps.len() - ok.len();
        let se = if ok.len() >= 2 {
            crate::stats::sample_sd(&ok)
        } else {
            f64::NAN
        };
        let unreliable =
            failures as f64 > MAX_FAILURE_SHARE * reps.len() as f64 || ok.len() < 2;
        BootstrapResult {
            point,
            se,
            ci_low: point - Z_95 * se,
            ci_high: point + Z_95 * se,
            replicates: ok,
            failures,
            unreliable,
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

/// Generic driver: `estimate` maps a weight draw to a replicate value or a
/// failure. Replicates run in parallel; results depend only on `seed`.
pub fn bootstrap_variance<F>(
    point: f64,
    n: usize,
    replicates: usize,
    scheme: WeightScheme,
    seed: u64,
    estimate: F,
) -> BootstrapResult
where
    F: Fn(&WeightDraw) -> Result<f64> + Sync,
{
    let reps: Vec<Option<f64>> = (0..replicates as u64)
        .into_par_iter()
        .map(|b| estimate(&draw_weights(n, scheme, seed, b)).ok())
        .collect();
    BootstrapResult::from_replicates(point, &reps)
}

/// Raw replicate values for several estimators sharing one candidate pool:
/// `out[b][e]` holds estimator `e`'s values in replicate `b`, or `None` if
/// that replicate failed for it.
pub fn replicate_values(
    dataset: &Dataset,
    designs: &DesignCache,
    pool: &FittedModels,
    estimators: &[FittedEstimator],
    cfg: &BootstrapConfig,
) -> Vec<Vec<Option<Vec<f64>>>> {
    (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|b| {
            let w = draw_weights(dataset.n(), cfg.weight_scheme, cfg.seed, b);
            match FittedModels::fit(dataset, designs, &pool.candidates, &w.omega, Some(pool)) {
                Ok(refit) => estimators
                    .iter()
                    .map(|e| e.replicate(dataset, &refit, &w.omega).ok())
                    .collect(),
                Err(_) => vec![None; estimators.len()],
            }
        })
        .collect()
}

/// Bootstrap inference for every value of every estimator:
/// `out[e][v]` is the result for value `v` of estimator `e`.
pub fn bootstrap_estimators(
    dataset: &Dataset,
    designs: &DesignCache,
    pool: &FittedModels,
    estimators: &[FittedEstimator],
    cfg: &BootstrapConfig,
) -> Vec<Vec<BootstrapResult>> {
    let raw = replicate_values(dataset, designs, pool, estimators, cfg);
    estimators
        .iter()
        .enumerate()
        .map(|(e, est)| {
            est.values
                .iter()
                .enumerate()
                .map(|(v, &point)| {
                    let reps: Vec<Option<f64>> = raw
                        .iter()
                        .map(|row| row[e].as_ref().and_then(|vals| vals.get(v).copied()))
                        .collect();
                    BootstrapResult::from_replicates(point, &reps)
                })
                .collect()
        })
        .collect()
}
