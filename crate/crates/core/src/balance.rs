//! Covariate balance between treated units and (matched) controls.

use serde::Serialize;

use crate::config::{Method, SchemaConfig};
use crate::data::Dataset;
use crate::error::{DsmError, Result};
use crate::matching::match_group;
use crate::models::{DesignCache, FittedModels, ScoreSet};
use crate::stats::sample_sd;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub treated_mean: f64,
    pub control_mean_before: f64,
    pub control_mean_after: f64,
    /// Mean differences divided by the covariate's sd in the full sample.
    pub std_diff_before: f64,
    pub std_diff_after: f64,
}

/// Balance of every covariate before matching and after matching treated
/// units to controls with weights `K/M` on the controls.
pub fn balance_table(dataset: &Dataset, control_k_over_m: &[f64]) -> Vec<BalanceRow> {
    let a = dataset.a();
    let n1 = dataset.arm_size(1) as f64;
    let n0 = dataset.arm_size(0) as f64;
    let names = dataset.covariate_names();
    dataset
        .x()
        .column_iter()
        .enumerate()
        .map(|(j, col)| {
            let v: Vec<f64> = col.iter().copied().collect();
            let sd = sample_sd(&v);
            let mut t = 0.0;
            let mut c = 0.0;
            let mut c_after = 0.0;
            let mut w_after = 0.0;
            for i in 0..v.len() {
                if a[i] == 1 {
                    t += v[i];
                } else {
                    c += v[i];
                    c_after += control_k_over_m[i] * v[i];
                    w_after += control_k_over_m[i];
                }
            }
            let treated_mean = t / n1;
            let control_mean_before = c / n0;
            let control_mean_after = c_after / w_after;
            let scale = |d: f64| if sd > 0.0 { d / sd } else { 0.0 };
            BalanceRow {
                covariate: names
                    .get(j)
                    .cloned()
                    .unwrap_or_else(|| format!("x{}", j + 1)),
                treated_mean,
                control_mean_before,
                control_mean_after,
                std_diff_before: scale(treated_mean - control_mean_before),
                std_diff_after: scale(treated_mean - control_mean_after),
            }
        })
        .collect()
}

/// Treated-to-control matching on the configured scores followed by
/// [`balance_table`].
pub fn run_balance(dataset: &Dataset, cfg: &SchemaConfig) -> Result<Vec<BalanceRow>> {
    cfg.validate()?;
    let candidates = cfg.candidate_lists()?;
    let scores = match cfg.method {
        Method::MatchX => {
            let x = dataset.x().clone();
            ScoreSet::from_raw(x.clone(), x, 0)?
        }
        Method::Dsm | Method::Psm | Method::Pgm => {
            let designs = DesignCache::build(dataset, &candidates)?;
            let ones = vec![1.0; dataset.n()];
            let pool = FittedModels::fit(dataset, &designs, &candidates, &ones, None)?;
            let ps: Vec<usize> = (0..candidates.propensity.len()).collect();
            let pg: Vec<usize> = (0..candidates.prognostic.len()).collect();
            match cfg.method {
                Method::Psm => ScoreSet::from_models(&pool, &ps, &[], None)?,
                Method::Pgm => ScoreSet::from_models(&pool, &[], &pg, None)?,
                _ => ScoreSet::from_models(&pool, &ps, &pg, None)?,
            }
        }
        other => {
            return Err(DsmError::Config(format!(
                "balance needs a matching method, not '{}'",
                other.name()
            )))
        }
    };
    let map = match_group(&scores.s0, dataset.a(), 0, cfg.m)?;
    Ok(balance_table(dataset, &map.k_over_m()))
}
