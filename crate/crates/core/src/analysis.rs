//! Configured estimation on a dataset: candidate fitting, point estimate,
//! bootstrap inference, and the resulting report.

use serde::Serialize;

use crate::bootstrap::{bootstrap_estimators, BootstrapResult};
use crate::config::{Estimand, SchemaConfig, WeightScheme};
use crate::data::Dataset;
use crate::error::Result;
use crate::estimator::{EstimationOptions, EstimatorSpec, FittedEstimator};
use crate::models::{DesignCache, FittedModels};

#[derive(Debug, Clone, Serialize)]
pub struct ValueReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_correction: Option<f64>,
    pub failures: usize,
    pub unreliable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicate_values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub weight_scheme: WeightScheme,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub estimator_tag: String,
    pub estimand: Estimand,
    pub n: usize,
    pub n_treated: usize,
    pub results: Vec<ValueReport>,
    pub bootstrap: BootstrapSummary,
    pub non_converged_propensity_models: Vec<usize>,
    pub config: SchemaConfig,
}

/// Everything needed to evaluate and bootstrap the configured estimator.
pub struct PreparedAnalysis {
    pub designs: DesignCache,
    pub pool: FittedModels,
    pub estimator: FittedEstimator,
}

pub fn estimation_options(cfg: &SchemaConfig) -> EstimationOptions {
    EstimationOptions {
        estimand: cfg.estimand.clone(),
        m: cfg.m,
        sieve_degree: cfg.sieve_degree,
        boxcox: cfg.boxcox_lambda,
        freeze_sieve: cfg.bootstrap.freeze_sieve,
    }
}

/// Fits the configured candidates and the point estimate.
pub fn prepare(dataset: &Dataset, cfg: &SchemaConfig) -> Result<PreparedAnalysis> {
    cfg.validate()?;
    let candidates = cfg.candidate_lists()?;
    let spec = EstimatorSpec::all_candidates(
        cfg.method,
        candidates.propensity.len(),
        candidates.prognostic.len(),
    )?;
    let designs = DesignCache::build(dataset, &candidates)?;
    let ones = vec![1.0; dataset.n()];
    let pool = FittedModels::fit(dataset, &designs, &candidates, &ones, None)?;
    let estimator = FittedEstimator::fit(&spec, dataset, &pool, &estimation_options(cfg))?;
    Ok(PreparedAnalysis {
        designs,
        pool,
        estimator,
    })
}

pub fn run_analysis(dataset: &Dataset, cfg: &SchemaConfig) -> Result<EstimateReport> {
    let prep = prepare(dataset, cfg)?;
    let boot = bootstrap_estimators(
        dataset,
        &prep.designs,
        &prep.pool,
        std::slice::from_ref(&prep.estimator),
        &cfg.bootstrap,
    )
    .remove(0);
    let est = &prep.estimator;
    for &x in &est.unattained {
        log::warn!("quantile level {x} was not reached on the inversion grid");
    }
    let xi = cfg.estimand.xi();
    let results = boot
        .into_iter()
        .enumerate()
        .map(|(v, r): (usize, BootstrapResult)| {
            if r.unreliable {
                log::warn!(
                    "{} of {} bootstrap replicates failed; inference is unreliable",
                    r.failures,
                    cfg.bootstrap.replicates
                );
            }
            ValueReport {
                xi: xi.get(v).copied(),
                point: r.point,
                se: r.se,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
                initial: est.components.map(|c| c.0),
                bias_correction: est.components.map(|c| c.1),
                failures: r.failures,
                unreliable: r.unreliable,
                replicate_values: cfg.bootstrap.diagnostics.then_some(r.replicates),
            }
        })
        .collect();
    Ok(EstimateReport {
        estimator_tag: est.spec.tag.clone(),
        estimand: cfg.estimand.clone(),
        n: dataset.n(),
        n_treated: dataset.arm_size(1),
        results,
        bootstrap: BootstrapSummary {
            replicates: cfg.bootstrap.replicates,
            weight_scheme: cfg.bootstrap.weight_scheme,
            seed: cfg.bootstrap.seed,
        },
        non_converged_propensity_models: prep
            .pool
            .propensity
            .iter()
            .enumerate()
            .filter(|(_, f)| !f.converged)
            .map(|(j, _)| j)
            .collect(),
        config: cfg.clone(),
    })
}
