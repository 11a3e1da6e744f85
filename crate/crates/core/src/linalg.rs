//! Weighted least squares through a column-pivoted Householder QR.
//!
//! Every regression in the crate (logistic IRLS steps, prognostic linear
//! models, sieve fits) goes through [`weighted_lstsq`]. Numerical rank is
//! decided on the pivoted diagonal of `R`: a column is dropped once its
//! remaining norm falls below `RANK_TOL` times the first pivot.

use nalgebra::DMatrix;

/// Relative rank tolerance applied to the pivoted `R` diagonal.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LstsqSolution {
    /// Coefficients in the original column order; dropped columns are zero.
    pub coef: Vec<f64>,
    pub rank: usize,
    /// Original indices of columns judged collinear with the kept ones.
    pub dropped: Vec<usize>,
}

impl LstsqSolution {
    pub fn is_full_rank(&self) -> bool {
        self.dropped.is_empty()
    }
}

/// Minimises `sum_i w_i (y_i - x_i' b)^2`. Rows with zero weight are inert.
///
/// Panics if the shapes of `design`, `y` and `weights` disagree.
pub fn weighted_lstsq(design: &DMatrix<f64>, y: &[f64], weights: &[f64]) -> LstsqSolution {
    let rows: Vec<usize> = (0..design.nrows()).filter(|&i| weights[i] > 0.0).collect();
    weighted_lstsq_rows(design, y, weights, &rows)
}

/// As [`weighted_lstsq`] but restricted to the listed rows.
pub fn weighted_lstsq_rows(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    rows: &[usize],
) -> LstsqSolution {
    assert_eq!(design.nrows(), y.len());
    assert_eq!(design.nrows(), weights.len());
    let m = rows.len();
    let p = design.ncols();

    // Column-major copy of sqrt(W) X restricted to `rows`.
    let mut a = vec![0.0; m * p];
    let mut b = vec![0.0; m];
    for (r, &i) in rows.iter().enumerate() {
        let sw = weights[i].max(0.0).sqrt();
        b[r] = sw * y[i];
        for j in 0..p {
            a[j * m + r] = sw * design[(i, j)];
        }
    }

    let mut perm: Vec<usize> = (0..p).collect();
    let mut rank = 0;
    let mut first_pivot = 0.0_f64;
    let steps = m.min(p);

    for k in 0..steps {
        // pick the remaining column with the largest trailing norm;
        // lowest index wins ties
        let mut best = k;
        let mut best_norm = -1.0;
        for j in k..p {
            let col = &a[j * m + k..j * m + m];
            let nrm: f64 = col.iter().map(|v| v * v).sum();
            if nrm > best_norm {
                best_norm = nrm;
                best = j;
            }
        }
        let best_norm = best_norm.sqrt();
        if k == 0 {
            first_pivot = best_norm;
        }
        if best_norm == 0.0 || best_norm <= RANK_TOL * first_pivot {
            break;
        }
        if best != k {
            for r in 0..m {
                a.swap(k * m + r, best * m + r);
            }
            perm.swap(k, best);
        }

        // Householder reflector for a[k.., k]
        let alpha = {
            let x0 = a[k * m + k];
            if x0 >= 0.0 {
                -best_norm
            } else {
                best_norm
            }
        };
        let mut v: Vec<f64> = a[k * m + k..k * m + m].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            let beta = 2.0 / vnorm2;
            for j in k + 1..p {
                let col = &mut a[j * m + k..j * m + m];
                let dot: f64 = col.iter().zip(&v).map(|(c, vv)| c * vv).sum();
                let s = beta * dot;
                for (c, vv) in col.iter_mut().zip(&v) {
                    *c -= s * vv;
                }
            }
            let seg = &mut b[k..m];
            let dot: f64 = seg.iter().zip(&v).map(|(c, vv)| c * vv).sum();
            let s = beta * dot;
            for (c, vv) in seg.iter_mut().zip(&v) {
                *c -= s * vv;
            }
        }
        a[k * m + k] = alpha;
        for r in k + 1..m {
            a[k * m + r] = 0.0;
        }
        rank += 1;
    }

    // back substitution on the leading rank x rank block
    let mut z = vec![0.0; rank];
    for i in (0..rank).rev() {
        let mut s = b[i];
        for j in i + 1..rank {
            s -= a[j * m + i] * z[j];
        }
        z[i] = s / a[i * m + i];
    }

    let mut coef = vec![0.0; p];
    for i in 0..rank {
        coef[perm[i]] = z[i];
    }
    let mut dropped: Vec<usize> = perm[rank..].to_vec();
    dropped.sort_unstable();
    LstsqSolution {
        coef,
        rank,
        dropped,
    }
}

/// `X b` for a dense design.
pub fn mat_vec(design: &DMatrix<f64>, coef: &[f64]) -> Vec<f64> {
    let (n, p) = design.shape();
    debug_assert_eq!(p, coef.len());
    let mut out = vec![0.0; n];
    for (j, &c) in coef.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let col = design.column(j);
        for (o, x) in out.iter_mut().zip(col.iter()) {
            *o += c * x;
        }
    }
    out
}
