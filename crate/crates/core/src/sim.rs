//! Repeated-sampling studies under the simulation design in [`crate::dgp`].

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_estimators, BootstrapResult};
use crate::config::{BootstrapConfig, Estimand};
use crate::design::FeatureMap;
use crate::dgp::{draw_potential_outcomes, generate_scenario, z_population_moments, DIM};
use crate::error::{DsmError, Result};
use crate::estimator::{EstimationOptions, EstimatorSpec, FittedEstimator};
use crate::models::{CandidateModels, DesignCache, FittedModels};
use crate::rng::{derive, Purpose};
use crate::stats::{iqr, mean, sample_sd, sorted_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimEstimand {
    #[serde(rename = "ATE")]
    Ate,
    #[serde(rename = "QTE")]
    Qte,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    pub estimators: Vec<String>,
    #[serde(default = "default_xi")]
    pub xi: Vec<f64>,
    #[serde(default = "default_estimands")]
    pub estimands: Vec<SimEstimand>,
    #[serde(rename = "M", default = "default_m")]
    pub m: usize,
    #[serde(default = "default_degree")]
    pub sieve_degree: usize,
    #[serde(default = "default_oracle_draws")]
    pub oracle_draws: usize,
    /// Coverage is reported only when bootstrap settings are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapConfig>,
}

fn default_n() -> usize {
    1000
}
fn default_xi() -> Vec<f64> {
    vec![0.75]
}
fn default_estimands() -> Vec<SimEstimand> {
    vec![SimEstimand::Ate, SimEstimand::Qte]
}
fn default_m() -> usize {
    1
}
fn default_degree() -> usize {
    2
}
fn default_oracle_draws() -> usize {
    10_000_000
}

impl ScenarioConfig {
    pub fn new(n: usize, replications: usize, seed: u64, estimators: &[&str]) -> Self {
        ScenarioConfig {
            n,
            replications,
            seed,
            estimators: estimators.iter().map(|s| s.to_string()).collect(),
            xi: default_xi(),
            estimands: default_estimands(),
            m: default_m(),
            sieve_degree: default_degree(),
            oracle_draws: default_oracle_draws(),
            bootstrap: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(s).map_err(|e| DsmError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(DsmError::Config("replications must be at least 1".into()));
        }
        if self.n < 50 {
            return Err(DsmError::Config("n must be at least 50".into()));
        }
        if self.m < 1 {
            return Err(DsmError::Config("M must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(DsmError::Config("no estimators requested".into()));
        }
        for t in &self.estimators {
            EstimatorSpec::parse_tag(t)?;
        }
        if self.estimands.contains(&SimEstimand::Qte) && self.xi.is_empty() {
            return Err(DsmError::Config("QTE requested without xi levels".into()));
        }
        for &x in &self.xi {
            if !(x > 0.0 && x < 1.0) {
                return Err(DsmError::Config(format!(
                    "quantile level {x} is not strictly inside (0, 1)"
                )));
            }
        }
        if self.oracle_draws < 1_000_000 {
            return Err(DsmError::Config("oracle_draws must be at least 1e6".into()));
        }
        if let Some(b) = &self.bootstrap {
            if b.replicates < 2 {
                return Err(DsmError::Config(
                    "bootstrap.replicates must be at least 2".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrueEstimands {
    pub ate: f64,
    /// `(xi, QTE)` pairs.
    pub qte: Vec<(f64, f64)>,
    pub z_means: [f64; DIM],
    pub z_sds: [f64; DIM],
}

impl TrueEstimands {
    pub fn qte_at(&self, xi: f64) -> Option<f64> {
        self.qte.iter().find(|(x, _)| *x == xi).map(|p| p.1)
    }
}

/// The ATE is zero by construction; each QTE is the difference of marginal
/// quantiles of `Y(1)` and `Y(0)` over `draws` oracle draws.
pub fn true_estimands(xi: &[f64], draws: usize, seed: u64) -> TrueEstimands {
    let (mut y0, mut y1, _) = draw_potential_outcomes(draws, seed);
    y0.sort_unstable_by(f64::total_cmp);
    y1.sort_unstable_by(f64::total_cmp);
    let mom = z_population_moments();
    TrueEstimands {
        ate: 0.0,
        qte: xi
            .iter()
            .map(|&x| (x, sorted_quantile(&y1, x) - sorted_quantile(&y0, x)))
            .collect(),
        z_means: mom.means,
        z_sds: mom.sds,
    }
}

/// Candidate 1 uses the correct transformed design, candidate 2 the raw
/// covariates.
pub fn simulation_candidates() -> CandidateModels {
    CandidateModels::new(
        vec![FeatureMap::SimulationZ, FeatureMap::Raw],
        vec![FeatureMap::SimulationZ, FeatureMap::Raw],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coverage {
    /// Percent of intervals containing the truth.
    pub rate: f64,
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

impl Coverage {
    pub fn from_hits(hits: usize, count: usize) -> Self {
        let p = hits as f64 / count as f64;
        let half = 1.96 * (p * (1.0 - p) / count as f64).sqrt();
        Coverage {
            rate: 100.0 * p,
            low: 100.0 * (p - half),
            high: 100.0 * (p + half),
            count,
        }
    }

    /// `"95.6 (94.4, 96.9)"`.
    pub fn formatted(&self) -> String {
        format!("{:.1} ({:.1}, {:.1})", self.rate, self.low, self.high)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MCRow {
    pub estimator: String,
    /// `"ATE"` or `"QTE(0.75)"`.
    pub estimand: String,
    pub truth: f64,
    /// Estimate minus truth, one per successful replication.
    pub errors: Vec<f64>,
    pub failures: usize,
    pub mean: f64,
    pub sd: f64,
    pub mc_se: f64,
    pub iqr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_bootstrap_se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<Coverage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage_text: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MCReport {
    pub config: ScenarioConfig,
    pub truth: TrueEstimands,
    pub rows: Vec<MCRow>,
}

/// Per-replication outcome for one (estimator, value) cell.
#[derive(Debug, Clone, Copy)]
struct Cell {
    estimate: f64,
    boot: Option<(f64, bool)>,
}

/// One (estimator, estimand-value) column of the study.
struct Column {
    tag: String,
    label: String,
    truth: f64,
    /// Which fitted estimator and which of its values.
    estimator: usize,
    value: usize,
}

fn estimand_jobs(cfg: &ScenarioConfig, truth: &TrueEstimands) -> Vec<(Estimand, Vec<(String, f64)>)> {
    let mut out = Vec::new();
    for e in &cfg.estimands {
        match e {
            SimEstimand::Ate => out.push((Estimand::Ate, vec![("ATE".to_string(), truth.ate)])),
            SimEstimand::Qte => out.push((
                Estimand::Qte { xi: cfg.xi.clone() },
                cfg.xi
                    .iter()
                    .map(|&x| (format!("QTE({x})"), truth.qte_at(x).expect("truth for xi")))
                    .collect(),
            )),
        }
    }
    out
}

/// Runs the study with truth values computed from the oracle.
pub fn run_monte_carlo(cfg: &ScenarioConfig) -> Result<MCReport> {
    cfg.validate()?;
    let truth = true_estimands(&cfg.xi, cfg.oracle_draws, cfg.seed);
    run_monte_carlo_with_truth(cfg, truth)
}

/// As [`run_monte_carlo`] with precomputed truth values.
pub fn run_monte_carlo_with_truth(cfg: &ScenarioConfig, truth: TrueEstimands) -> Result<MCReport> {
    cfg.validate()?;
    let specs: Vec<EstimatorSpec> = cfg
        .estimators
        .iter()
        .map(|t| EstimatorSpec::parse_tag(t))
        .collect::<Result<_>>()?;
    let jobs = estimand_jobs(cfg, &truth);

    let mut columns = Vec::new();
    let mut est_index = 0;
    for (_, labels) in &jobs {
        for spec in &specs {
            for (v, (label, t)) in labels.iter().enumerate() {
                columns.push(Column {
                    tag: spec.tag.clone(),
                    label: label.clone(),
                    truth: *t,
                    estimator: est_index,
                    value: v,
                });
            }
            est_index += 1;
        }
    }

    let per_rep: Vec<Vec<Option<Cell>>> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|rep| run_replication(cfg, &specs, &jobs, &columns, rep, est_index))
        .collect();

    let rows = columns
        .iter()
        .enumerate()
        .map(|(c, col)| summarize(col, per_rep.iter().map(|r| r[c]), cfg.bootstrap.is_some()))
        .collect();
    Ok(MCReport {
        config: cfg.clone(),
        truth,
        rows,
    })
}

fn run_replication(
    cfg: &ScenarioConfig,
    specs: &[EstimatorSpec],
    jobs: &[(Estimand, Vec<(String, f64)>)],
    columns: &[Column],
    rep: u64,
    n_estimators: usize,
) -> Vec<Option<Cell>> {
    let failed = || vec![None; columns.len()];
    let scenario = match generate_scenario(cfg.n, cfg.seed, rep) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("replication {rep}: data generation failed: {e}");
            return failed();
        }
    };
    let data = &scenario.dataset;
    let candidates = simulation_candidates();
    let prepared = DesignCache::build(data, &candidates).and_then(|d| {
        let ones = vec![1.0; data.n()];
        FittedModels::fit(data, &d, &candidates, &ones, None).map(|p| (d, p))
    });
    let (designs, pool) = match prepared {
        Ok(v) => v,
        Err(e) => {
            log::warn!("replication {rep}: candidate fitting failed: {e}");
            return failed();
        }
    };

    // fitted estimators in column order of `estimator` index; failures kept
    // as None so indices stay aligned
    let mut fitted: Vec<Option<FittedEstimator>> = Vec::with_capacity(n_estimators);
    for (estimand, _) in jobs {
        let options = EstimationOptions {
            estimand: estimand.clone(),
            m: cfg.m,
            sieve_degree: cfg.sieve_degree,
            boxcox: None,
            freeze_sieve: cfg.bootstrap.as_ref().is_some_and(|b| b.freeze_sieve),
        };
        for spec in specs {
            match FittedEstimator::fit(spec, data, &pool, &options) {
                Ok(f) => fitted.push(Some(f)),
                Err(e) => {
                    log::warn!("replication {rep}: {} failed: {e}", spec.tag);
                    fitted.push(None);
                }
            }
        }
    }

    let boot: Option<Vec<Option<Vec<BootstrapResult>>>> = cfg.bootstrap.as_ref().map(|b| {
        let ok: Vec<FittedEstimator> = fitted.iter().flatten().cloned().collect();
        let mut bcfg = b.clone();
        bcfg.seed = derive(b.seed ^ cfg.seed, rep, Purpose::BootstrapSeed);
        let mut results = bootstrap_estimators(data, &designs, &pool, &ok, &bcfg).into_iter();
        fitted
            .iter()
            .map(|f| f.as_ref().map(|_| results.next().expect("one result per estimator")))
            .collect()
    });

    columns
        .iter()
        .map(|col| {
            let est = fitted[col.estimator].as_ref()?;
            let estimate = est.values[col.value];
            let boot = boot.as_ref().and_then(|b| {
                b[col.estimator].as_ref().map(|r| {
                    let r = &r[col.value];
                    (r.se, r.covers(col.truth) && !r.se.is_nan())
                })
            });
            Some(Cell { estimate, boot })
        })
        .collect()
}

fn summarize(col: &Column, cells: impl Iterator<Item = Option<Cell>>, with_boot: bool) -> MCRow {
    let cells: Vec<Option<Cell>> = cells.collect();
    let ok: Vec<Cell> = cells.iter().flatten().copied().collect();
    let errors: Vec<f64> = ok.iter().map(|c| c.estimate - col.truth).collect();
    let failures = cells.len() - ok.len();
    let sd = sample_sd(&errors);
    let (coverage, mean_se) = if with_boot && !ok.is_empty() {
        let hits = ok.iter().filter(|c| c.boot.is_some_and(|b| b.1)).count();
        let ses: Vec<f64> = ok
            .iter()
            .filter_map(|c| c.boot.map(|b| b.0))
            .filter(|s| s.is_finite())
            .collect();
        (Some(Coverage::from_hits(hits, ok.len())), Some(mean(&ses)))
    } else {
        (None, None)
    };
    MCRow {
        estimator: col.tag.clone(),
        estimand: col.label.clone(),
        truth: col.truth,
        failures,
        mean: mean(&errors),
        sd,
        mc_se: sd / (errors.len() as f64).sqrt(),
        iqr: if errors.is_empty() { f64::NAN } else { iqr(&errors) },
        mean_bootstrap_se: mean_se,
        coverage_text: coverage.as_ref().map(Coverage::formatted),
        coverage,
        errors,
    }
}

impl MCReport {
    pub fn row(&self, estimator: &str, estimand: &str) -> Option<&MCRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.estimand == estimand)
    }

    /// Human-readable table: one line per estimator, one column group per
    /// estimand.
    pub fn table(&self) -> String {
        let mut labels: Vec<&str> = Vec::new();
        let mut tags: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !labels.contains(&r.estimand.as_str()) {
                labels.push(&r.estimand);
            }
            if !tags.contains(&r.estimator.as_str()) {
                tags.push(&r.estimator);
            }
        }
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "estimator");
        for l in &labels {
            let _ = write!(out, " | {:^44}", l);
        }
        out.push('\n');
        let _ = write!(out, "{:<10}", "");
        for _ in &labels {
            let _ = write!(out, " | {:>8} {:>7} {:>7}  {:<19}", "bias", "sd", "iqr", "coverage");
        }
        out.push('\n');
        for t in &tags {
            let _ = write!(out, "{:<10}", t);
            for l in &labels {
                match self.row(t, l) {
                    Some(r) => {
                        let cov = r.coverage_text.clone().unwrap_or_else(|| "-".into());
                        let _ = write!(out, " | {:>8.4} {:>7.4} {:>7.4}  {:<19}", r.mean, r.sd, r.iqr, cov);
                    }
                    None => {
                        let _ = write!(out, " | {:^44}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Long-format CSV of every error value for external plotting.
    pub fn violin_csv(&self) -> String {
        let mut out = String::from("estimator,estimand,replication,error\n");
        for r in &self.rows {
            for (i, e) in r.errors.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", r.estimator, r.estimand, i, e);
            }
        }
        out
    }
}
