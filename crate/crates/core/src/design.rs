//! Feature maps turning covariates into regression designs.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dgp;
use crate::error::{DsmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureMap {
    /// Intercept plus the covariates as given.
    #[serde(rename = "raw")]
    Raw,
    /// Intercept plus the ten standardized simulation transforms `Z`.
    #[serde(rename = "paper-Z", alias = "sim-Z")]
    SimulationZ,
    /// Intercept, all covariates, and squares of the non-binary ones.
    #[serde(rename = "first-order-plus-squares-of-numeric")]
    FirstOrderPlusSquares,
}

impl FeatureMap {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMap::Raw => "raw",
            FeatureMap::SimulationZ => "paper-Z",
            FeatureMap::FirstOrderPlusSquares => "first-order-plus-squares-of-numeric",
        }
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureMap {
    type Err = DsmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(FeatureMap::Raw),
            "paper-Z" | "sim-Z" => Ok(FeatureMap::SimulationZ),
            "first-order-plus-squares-of-numeric" => Ok(FeatureMap::FirstOrderPlusSquares),
            other => Err(DsmError::Config(format!("unknown feature_map '{other}'"))),
        }
    }
}

fn is_binary(col: nalgebra::DVectorView<'_, f64>) -> bool {
    col.iter().all(|&v| v == 0.0 || v == 1.0)
}

fn with_intercept(cols: Vec<Vec<f64>>, n: usize) -> DMatrix<f64> {
    let p = cols.len() + 1;
    let mut m = DMatrix::zeros(n, p);
    m.column_mut(0).fill(1.0);
    for (j, c) in cols.into_iter().enumerate() {
        m.column_mut(j + 1).copy_from_slice(&c);
    }
    m
}

pub fn build_design(dataset: &Dataset, map: FeatureMap) -> Result<DMatrix<f64>> {
    let x = dataset.x();
    let n = dataset.n();
    match map {
        FeatureMap::Raw => {
            let cols = x.column_iter().map(|c| c.iter().copied().collect()).collect();
            Ok(with_intercept(cols, n))
        }
        FeatureMap::SimulationZ => {
            let z = dgp::z_transform(x)?;
            let cols = z.column_iter().map(|c| c.iter().copied().collect()).collect();
            Ok(with_intercept(cols, n))
        }
        FeatureMap::FirstOrderPlusSquares => {
            let mut cols: Vec<Vec<f64>> =
                x.column_iter().map(|c| c.iter().copied().collect()).collect();
            for c in x.column_iter() {
                if !is_binary(c) {
                    cols.push(c.iter().map(|v| v * v).collect());
                }
            }
            Ok(with_intercept(cols, n))
        }
    }
}

/// [`build_design`] addressed by config name.
pub fn build_design_named(dataset: &Dataset, name: &str) -> Result<DMatrix<f64>> {
    build_design(dataset, name.parse()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_prepends_intercept() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0]);
        let d = Dataset::new(x, vec![0, 1, 0], vec![0.0; 3]).unwrap();
        let m = build_design(&d, FeatureMap::Raw).unwrap();
        assert_eq!(m.ncols(), 3);
        assert_eq!(m.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 3.0, 4.0]);
    }

    #[test]
    fn squares_only_for_numeric_columns() {
        // three numeric and four binary columns: 1 + 7 + 3 = 11
        let n = 6;
        let x = DMatrix::from_fn(n, 7, |i, j| match j {
            0 | 1 | 6 => (i * (j + 2)) as f64 + 0.5,
            _ => ((i + j) % 2) as f64,
        });
        let a = (0..n).map(|i| (i % 2) as u8).collect();
        let d = Dataset::new(x, a, vec![0.0; n]).unwrap();
        let m = build_design(&d, FeatureMap::FirstOrderPlusSquares).unwrap();
        assert_eq!(m.ncols(), 11);
        assert_eq!(m[(2, 8)], m[(2, 1)] * m[(2, 1)]);
    }

    #[test]
    fn unknown_name_is_config_error() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let d = Dataset::new(x, vec![0, 1], vec![0.0; 2]).unwrap();
        assert!(matches!(
            build_design_named(&d, "splines"),
            Err(DsmError::Config(_))
        ));
    }

    #[test]
    fn simulation_z_needs_ten_covariates() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let d = Dataset::new(x, vec![0, 1], vec![0.0; 2]).unwrap();
        assert!(build_design(&d, FeatureMap::SimulationZ).is_err());
    }
}
