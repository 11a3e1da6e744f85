//! Dataset representation, CSV ingestion and column standardization.

use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::SchemaConfig;
use crate::error::{DsmError, Result};

/// Covariates, binary treatment and outcome for `n` units. Row order is unit
/// identity: every match index in the crate refers to it.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: DMatrix<f64>,
    a: Vec<u8>,
    y: Vec<f64>,
    covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, a: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        let names = (0..x.ncols()).map(|j| format!("x{}", j + 1)).collect();
        Self::with_names(x, a, y, names)
    }

    pub fn with_names(
        x: DMatrix<f64>,
        a: Vec<u8>,
        y: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(DsmError::Domain("dataset has no units".into()));
        }
        if x.ncols() == 0 {
            return Err(DsmError::Domain("dataset has no covariates".into()));
        }
        if a.len() != n {
            return Err(DsmError::Dimension {
                expected: n,
                got: a.len(),
            });
        }
        if y.len() != n {
            return Err(DsmError::Dimension {
                expected: n,
                got: y.len(),
            });
        }
        if covariate_names.len() != x.ncols() {
            return Err(DsmError::Dimension {
                expected: x.ncols(),
                got: covariate_names.len(),
            });
        }
        if let Some(i) = a.iter().position(|&v| v > 1) {
            return Err(DsmError::Domain(format!(
                "treatment of unit {i} is {}, expected 0 or 1",
                a[i]
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DsmError::NonFinite("covariates".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(DsmError::NonFinite("outcome".into()));
        }
        let treated = a.iter().filter(|&&v| v == 1).count();
        if treated == 0 || treated == n {
            return Err(DsmError::Domain(format!(
                "both arms must be non-empty (treated = {treated}, control = {})",
                n - treated
            )));
        }
        Ok(Dataset {
            x,
            a,
            y,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Unit indices with treatment `arm`, in increasing order.
    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.a[i] == arm).collect()
    }

    pub fn arm_size(&self, arm: u8) -> usize {
        self.a.iter().filter(|&&v| v == arm).count()
    }

    /// Same units with a replaced outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        Self::with_names(self.x.clone(), self.a.clone(), y, self.covariate_names.clone())
    }
}

/// Reads a header-first CSV and extracts the configured columns.
pub fn load_dataset<R: Read>(source: R, schema: &SchemaConfig) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| DsmError::Schema(format!("cannot read header row: {e}")))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DsmError::Schema(format!("missing column '{name}'")))
    };
    let t_col = find(&schema.treatment_column)?;
    let y_col = find(&schema.outcome_column)?;
    let x_cols: Vec<usize> = schema
        .covariate_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;

    let p = x_cols.len();
    let mut xs: Vec<f64> = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let row = row + 1;
        let record = record.map_err(|e| DsmError::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| DsmError::Parse {
                row,
                column: name.to_string(),
                message: format!("'{raw}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(DsmError::Parse {
                    row,
                    column: name.to_string(),
                    message: format!("'{raw}' is not finite"),
                });
            }
            Ok(v)
        };
        let t = cell(t_col, &schema.treatment_column)?;
        let t = if t == 0.0 {
            0
        } else if t == 1.0 {
            1
        } else {
            return Err(DsmError::Parse {
                row,
                column: schema.treatment_column.clone(),
                message: format!("treatment must be 0 or 1, found {t}"),
            });
        };
        a.push(t);
        y.push(cell(y_col, &schema.outcome_column)?);
        for (&c, name) in x_cols.iter().zip(&schema.covariate_columns) {
            xs.push(cell(c, name)?);
        }
    }
    let n = a.len();
    if n == 0 {
        return Err(DsmError::Domain("data file has no rows".into()));
    }
    let x = DMatrix::from_row_slice(n, p, &xs);
    Dataset::with_names(x, a, y, schema.covariate_columns.clone())
}

/// Affine map taking each column to mean 0 and sample variance 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl StandardizationParams {
    pub fn apply(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if v.ncols() != self.means.len() {
            return Err(DsmError::Dimension {
                expected: self.means.len(),
                got: v.ncols(),
            });
        }
        let mut out = v.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.means[j], self.sds[j]);
            for x in col.iter_mut() {
                *x = (*x - m) / s;
            }
        }
        Ok(out)
    }

    pub fn invert(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if v.ncols() != self.means.len() {
            return Err(DsmError::Dimension {
                expected: self.means.len(),
                got: v.ncols(),
            });
        }
        let mut out = v.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.means[j], self.sds[j]);
            for x in col.iter_mut() {
                *x = *x * s + m;
            }
        }
        Ok(out)
    }
}

/// Column means and `n - 1` sample standard deviations of `v`.
pub fn column_moments(v: &DMatrix<f64>) -> Result<StandardizationParams> {
    let n = v.nrows();
    if n < 2 {
        return Err(DsmError::Domain(
            "standardization needs at least two rows".into(),
        ));
    }
    let mut means = Vec::with_capacity(v.ncols());
    let mut sds = Vec::with_capacity(v.ncols());
    for (j, col) in v.column_iter().enumerate() {
        let m = col.iter().sum::<f64>() / n as f64;
        let ss: f64 = col.iter().map(|x| (x - m) * (x - m)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        if !(sd > 0.0) || sd <= 1e-14 * m.abs() {
            return Err(DsmError::DegenerateColumn { index: j });
        }
        means.push(m);
        sds.push(sd);
    }
    Ok(StandardizationParams { means, sds })
}

pub fn standardize_columns(v: &DMatrix<f64>) -> Result<(DMatrix<f64>, StandardizationParams)> {
    let params = column_moments(v)?;
    let out = params.apply(v)?;
    Ok((out, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SchemaConfig;

    fn schema() -> SchemaConfig {
        SchemaConfig::minimal("treat", "y", &["x1", "x2"])
    }

    #[test]
    fn loads_small_csv_in_row_order() {
        let csv = "x1,x2,treat,y\n1,0,0,1.5\n2,1,1,2.5\n3,0,0,3.5\n4,1,1,4.5\n";
        let d = load_dataset(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.arm_size(0), 2);
        assert_eq!(d.arm_size(1), 2);
        assert_eq!(d.a(), &[0, 1, 0, 1]);
        assert_eq!(d.y(), &[1.5, 2.5, 3.5, 4.5]);
        assert_eq!(d.x()[(2, 0)], 3.0);
        assert_eq!(d.x()[(3, 1)], 1.0);
    }

    #[test]
    fn rejects_non_binary_treatment_with_row() {
        let csv = "x1,x2,treat,y\n1,0,0,1\n2,1,2,2\n";
        match load_dataset(csv.as_bytes(), &schema()) {
            Err(DsmError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "treat");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_names_it() {
        let csv = "x1,treat,y\n1,0,1\n";
        let err = load_dataset(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(&err, DsmError::Schema(m) if m.contains("x2")), "{err}");
    }

    #[test]
    fn non_numeric_and_missing_cells_are_parse_errors() {
        let csv = "x1,x2,treat,y\n1,0,0,1\n2,abc,1,2\n";
        let err = load_dataset(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, DsmError::Parse { row: 2, .. }));
        let csv = "x1,x2,treat,y\n1,0,0,1\n2,,1,2\n";
        assert!(load_dataset(csv.as_bytes(), &schema()).is_err());
    }

    #[test]
    fn empty_arm_is_domain_error() {
        let csv = "x1,x2,treat,y\n1,0,1,1\n2,1,1,2\n";
        let err = load_dataset(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, DsmError::Domain(_)));
    }

    #[test]
    fn standardize_simple_column() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let (s, p) = standardize_columns(&v).unwrap();
        assert_eq!(p.means, vec![2.0]);
        assert_eq!(p.sds, vec![1.0]);
        assert_eq!(s.as_slice(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_column_is_degenerate() {
        let v = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let err = standardize_columns(&v).unwrap_err();
        assert!(matches!(err, DsmError::DegenerateColumn { index: 1 }));
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn standardization_round_trips(
            vals in proptest::collection::vec(-1e3f64..1e3, 6..60),
            shift in -1e4f64..1e4,
        ) {
            let n = vals.len() / 2;
            let v = DMatrix::from_fn(n, 2, |i, j| vals[i * 2 + j] + shift * j as f64);
            prop_assume!(column_moments(&v).is_ok());
            let (s, p) = standardize_columns(&v).unwrap();
            for col in s.column_iter() {
                let m = col.iter().sum::<f64>() / n as f64;
                prop_assert!(m.abs() < 1e-9);
            }
            let back = p.invert(&s).unwrap();
            for (x, y) in back.iter().zip(v.iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
