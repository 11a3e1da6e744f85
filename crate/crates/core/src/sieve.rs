//! Power-series sieve regression of an outcome on matching scores.

use nalgebra::DMatrix;

use crate::error::{DsmError, Result};
use crate::linalg::{mat_vec, weighted_lstsq_rows};

/// Residual standard deviations are never reported below this value.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Monomials of total degree `<= degree` in `dim` variables, ordered by
/// degree and then lexicographically: `1, s1, s2, s1^2, s1 s2, s2^2, ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PowerBasis {
    pub dim: usize,
    pub degree: usize,
    /// Each term is a non-decreasing list of variable indices.
    pub terms: Vec<Vec<usize>>,
}

impl PowerBasis {
    pub fn new(dim: usize, degree: usize) -> Self {
        let mut terms = vec![Vec::new()];
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..degree {
            let mut next = Vec::new();
            for t in &frontier {
                let start = t.last().copied().unwrap_or(0);
                for v in start..dim {
                    let mut u = t.clone();
                    u.push(v);
                    next.push(u);
                }
            }
            terms.extend(next.iter().cloned());
            frontier = next;
        }
        PowerBasis { dim, degree, terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn term_name(&self, t: usize) -> String {
        let term = &self.terms[t];
        if term.is_empty() {
            return "1".into();
        }
        term.iter()
            .map(|v| format!("s{}", v + 1))
            .collect::<Vec<_>>()
            .join("*")
    }

    pub fn expand(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(s.ncols(), self.dim);
        let n = s.nrows();
        let mut out = DMatrix::zeros(n, self.terms.len());
        for (t, term) in self.terms.iter().enumerate() {
            let mut col = out.column_mut(t);
            for i in 0..n {
                col[i] = term.iter().map(|&v| s[(i, v)]).product();
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SieveFit {
    pub basis: PowerBasis,
    /// Coefficients per basis term; dropped terms have coefficient zero.
    pub coef: Vec<f64>,
    pub sigma: f64,
    /// Basis terms removed as collinear.
    pub dropped: Vec<usize>,
    pub sigma_floored: bool,
    /// Fitted values at every row of the score matrix used for fitting.
    pub fitted: Vec<f64>,
}

impl SieveFit {
    pub fn predict(&self, s: &DMatrix<f64>) -> Vec<f64> {
        mat_vec(&self.basis.expand(s), &self.coef)
    }

    pub fn dropped_names(&self) -> Vec<String> {
        self.dropped.iter().map(|&t| self.basis.term_name(t)).collect()
    }
}

/// Weighted least squares of `y` on the degree-`degree` power basis of
/// `s`, restricted to `rows`. Collinear terms are dropped rather than
/// reported as errors. `sigma` uses denominator `sum(weights) - rank`.
pub fn fit_sieve(
    s: &DMatrix<f64>,
    y: &[f64],
    rows: &[usize],
    weights: &[f64],
    degree: usize,
) -> Result<SieveFit> {
    let n = s.nrows();
    if y.len() != n || weights.len() != n {
        return Err(DsmError::Dimension {
            expected: n,
            got: y.len().min(weights.len()),
        });
    }
    let rows: Vec<usize> = rows.iter().copied().filter(|&i| weights[i] > 0.0).collect();
    if rows.is_empty() {
        return Err(DsmError::Domain("sieve fit on an empty arm".into()));
    }
    let basis = PowerBasis::new(s.ncols(), degree);
    let design = basis.expand(s);
    let sol = weighted_lstsq_rows(&design, y, weights, &rows);
    let fitted = mat_vec(&design, &sol.coef);
    let mut rss = 0.0;
    let mut wsum = 0.0;
    for &i in &rows {
        let r = y[i] - fitted[i];
        rss += weights[i] * r * r;
        wsum += weights[i];
    }
    let dof = wsum - sol.rank as f64;
    let raw = if dof > 0.0 { (rss / dof).sqrt() } else { 0.0 };
    let sigma_floored = !(raw >= SIGMA_FLOOR);
    Ok(SieveFit {
        basis,
        coef: sol.coef,
        sigma: if sigma_floored { SIGMA_FLOOR } else { raw },
        dropped: sol.dropped,
        sigma_floored,
        fitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_order_two_variables() {
        let b = PowerBasis::new(2, 2);
        let names: Vec<String> = (0..b.len()).map(|t| b.term_name(t)).collect();
        assert_eq!(names, ["1", "s1", "s2", "s1*s1", "s1*s2", "s2*s2"]);
        assert_eq!(PowerBasis::new(4, 2).len(), 15);
        assert_eq!(PowerBasis::new(3, 0).len(), 1);
    }

    #[test]
    fn linear_outcome_is_reproduced() {
        let s = DMatrix::from_fn(12, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let y: Vec<f64> = (0..12).map(|i| 1.5 - 2.0 * s[(i, 0)] + 0.5 * s[(i, 1)]).collect();
        let rows: Vec<usize> = (0..12).collect();
        let fit = fit_sieve(&s, &y, &rows, &[1.0; 12], 2).unwrap();
        for i in 0..12 {
            assert!((fit.fitted[i] - y[i]).abs() < 1e-8);
        }
        assert!(fit.sigma_floored);
        assert_eq!(fit.sigma, SIGMA_FLOOR);
    }

    #[test]
    fn degree_zero_is_arm_mean() {
        let s = DMatrix::from_column_slice(5, 1, &[0.1, 0.4, 0.2, 0.9, 0.3]);
        let y = [1.0, 2.0, 10.0, 4.0, 6.0];
        let fit = fit_sieve(&s, &y, &[0, 1, 3], &[1.0; 5], 0).unwrap();
        for v in &fit.fitted {
            assert!((v - 7.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_rows_drops_terms() {
        let s = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let fit = fit_sieve(&s, &[1.0, 2.0, 0.0], &[0, 1], &[1.0; 3], 2).unwrap();
        assert_eq!(fit.dropped.len(), 1);
        assert!((fit.fitted[0] - 1.0).abs() < 1e-12 && (fit.fitted[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn residuals_orthogonal_to_basis() {
        let s = DMatrix::from_fn(40, 2, |i, j| ((i * 13 + j * 5) % 17) as f64 / 4.0);
        let y: Vec<f64> = (0..40).map(|i| ((i * 31) % 7) as f64).collect();
        let rows: Vec<usize> = (0..40).collect();
        let fit = fit_sieve(&s, &y, &rows, &[1.0; 40], 2).unwrap();
        let design = fit.basis.expand(&s);
        for t in 0..design.ncols() {
            let ip: f64 = (0..40).map(|i| design[(i, t)] * (y[i] - fit.fitted[i])).sum();
            assert!(ip.abs() < 1e-6);
        }
    }
}
