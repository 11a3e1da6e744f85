//! Simulation data-generating process.
//!
//! Ten confounders `X_j ~ Uniform[1 - sqrt(3), 1 + sqrt(3)]` (mean 1,
//! variance 1) are mapped through ten nonlinear transforms to `Z`, which is
//! then shifted and scaled with fixed population constants so every `Z_j`
//! has mean 1 and variance 1. Outcomes and treatment are linear in `Z`:
//!
//! * `Y(0) = b'Z + e0`, `e0 ~ N(0, 4)`
//! * `Y(1) = b'Z + e1`, `e1 ~ N(0, 1)`
//! * `logit P(A = 1 | X) = a'Z`
//!
//! with `b = (1,1,1,1,1,-1,-1,-1,-1,-1) / 2` and `a = b / 2`.
//!
//! The population moments of the raw transforms are available in closed
//! form (uniform and triangular characteristic functions), so the
//! standardization constants are exact rather than Monte Carlo estimates.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{DsmError, Result};
use crate::rng::{stream, Purpose};
use crate::stats::expit;

pub const DIM: usize = 10;

pub const OUTCOME_COEF: [f64; DIM] = [0.5, 0.5, 0.5, 0.5, 0.5, -0.5, -0.5, -0.5, -0.5, -0.5];
pub const PROPENSITY_COEF: [f64; DIM] = [
    0.25, 0.25, 0.25, 0.25, 0.25, -0.25, -0.25, -0.25, -0.25, -0.25,
];
pub const SD_CONTROL_NOISE: f64 = 2.0;
pub const SD_TREATED_NOISE: f64 = 1.0;

fn support() -> (f64, f64) {
    let r = 3f64.sqrt();
    (1.0 - r, 1.0 + r)
}

/// The ten transforms before standardization.
pub fn z_raw(x: &[f64]) -> [f64; DIM] {
    debug_assert_eq!(x.len(), DIM);
    [
        (x[0] / 2.0).exp(),
        (x[1] / 3.0).exp(),
        ((x[2] + 1.0) * (x[2] + 1.0)).ln(),
        ((x[3] + 1.0) * (x[3] + 1.0)).ln(),
        if x[4] > 0.5 { 1.0 } else { 0.0 },
        if x[5] > 0.75 { 1.0 } else { 0.0 },
        (x[6] - x[7]).sin(),
        (x[6] + x[7]).cos(),
        x[8].sin(),
        x[9].cos(),
    ]
}

/// Population mean and standard deviation of each raw transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZMoments {
    pub means: [f64; DIM],
    pub sds: [f64; DIM],
}

fn sinc(t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        t.sin() / t
    }
}

/// Exact first two moments of the raw transforms under the uniform design.
pub fn z_population_moments() -> ZMoments {
    let (lo, hi) = support();
    let w = hi - lo;
    let mut means = [0.0; DIM];
    let mut second = [0.0; DIM];

    // exp(X/2), exp(X/3)
    let exp_moment = |c: f64| ((c * hi).exp() - (c * lo).exp()) / (c * w);
    means[0] = exp_moment(0.5);
    second[0] = exp_moment(1.0);
    means[1] = exp_moment(1.0 / 3.0);
    second[1] = exp_moment(2.0 / 3.0);

    // 2 log(U) with U = X + 1 uniform on [lo + 1, hi + 1], all positive
    let (c, d) = (lo + 1.0, hi + 1.0);
    let int_log = |u: f64| u * u.ln() - u;
    let int_log2 = |u: f64| {
        let l = u.ln();
        u * (l * l - 2.0 * l + 2.0)
    };
    let m_log = 2.0 * (int_log(d) - int_log(c)) / w;
    let s_log = 4.0 * (int_log2(d) - int_log2(c)) / w;
    means[2] = m_log;
    second[2] = s_log;
    means[3] = m_log;
    second[3] = s_log;

    // indicators
    let p5 = (hi - 0.5) / w;
    let p6 = (hi - 0.75) / w;
    means[4] = p5;
    second[4] = p5;
    means[5] = p6;
    second[5] = p6;

    // Differences and sums of two iid uniforms have characteristic function
    // sinc(t w / 2)^2 around their centre (0 and 2 respectively).
    let tri = |t: f64| sinc(t * w / 2.0).powi(2);
    means[6] = 0.0;
    second[6] = 0.5 * (1.0 - tri(2.0));
    means[7] = 2f64.cos() * tri(1.0);
    second[7] = 0.5 * (1.0 + 4f64.cos() * tri(2.0));

    // sin X and cos X with X centred at 1
    let uni = |t: f64| sinc(t * w / 2.0);
    means[8] = 1f64.sin() * uni(1.0);
    second[8] = 0.5 * (1.0 - 2f64.cos() * uni(2.0));
    means[9] = 1f64.cos() * uni(1.0);
    second[9] = 0.5 * (1.0 + 2f64.cos() * uni(2.0));

    let mut sds = [0.0; DIM];
    for j in 0..DIM {
        sds[j] = (second[j] - means[j] * means[j]).sqrt();
    }
    ZMoments { means, sds }
}

/// Applies the ten transforms and the fixed population standardization
/// (mean 1, variance 1 per coordinate).
pub fn z_transform(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != DIM {
        return Err(DsmError::Dimension {
            expected: DIM,
            got: x.ncols(),
        });
    }
    let mom = z_population_moments();
    let n = x.nrows();
    let mut z = DMatrix::zeros(n, DIM);
    let mut row = [0.0; DIM];
    for i in 0..n {
        for j in 0..DIM {
            row[j] = x[(i, j)];
        }
        let raw = z_raw(&row);
        for j in 0..DIM {
            z[(i, j)] = (raw[j] - mom.means[j]) / mom.sds[j] + 1.0;
        }
    }
    Ok(z)
}

/// One draw from the DGP together with its latent quantities.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub dataset: Dataset,
    pub z: DMatrix<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub propensity: Vec<f64>,
}

fn linear(coef: &[f64; DIM], z: &DMatrix<f64>, i: usize) -> f64 {
    (0..DIM).map(|j| coef[j] * z[(i, j)]).sum()
}

fn draw_x(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let (lo, hi) = support();
    DMatrix::from_fn(n, DIM, |_, _| rng.gen_range(lo..hi))
}

/// Generates `n` units. Deterministic in `(seed, rep)`.
pub fn generate_scenario(n: usize, seed: u64, rep: u64) -> Result<Scenario> {
    let mut rng = stream(seed, rep, Purpose::Data);
    let x = draw_x(&mut rng, n);
    let z = z_transform(&x)?;
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut ps = Vec::with_capacity(n);
    for i in 0..n {
        let loc = linear(&OUTCOME_COEF, &z, i);
        let e0: f64 = StandardNormal.sample(&mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        let p = expit(linear(&PROPENSITY_COEF, &z, i));
        let u: f64 = rng.gen();
        let ai = u8::from(u < p);
        let v0 = loc + SD_CONTROL_NOISE * e0;
        let v1 = loc + SD_TREATED_NOISE * e1;
        y0.push(v0);
        y1.push(v1);
        ps.push(p);
        a.push(ai);
        y.push(if ai == 1 { v1 } else { v0 });
    }
    let dataset = Dataset::new(x, a, y)?;
    Ok(Scenario {
        dataset,
        z,
        y0,
        y1,
        propensity: ps,
    })
}

/// Draws `count` potential-outcome pairs and treatment probabilities
/// without building a dataset. Used by the truth oracles.
pub fn draw_potential_outcomes(
    count: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = stream(seed, 0, Purpose::Oracle);
    let (lo, hi) = support();
    let mom = z_population_moments();
    let mut y0 = Vec::with_capacity(count);
    let mut y1 = Vec::with_capacity(count);
    let mut ps = Vec::with_capacity(count);
    let mut x = [0.0; DIM];
    for _ in 0..count {
        for v in x.iter_mut() {
            *v = rng.gen_range(lo..hi);
        }
        let raw = z_raw(&x);
        let mut loc = 0.0;
        let mut eta = 0.0;
        for j in 0..DIM {
            let zj = (raw[j] - mom.means[j]) / mom.sds[j] + 1.0;
            loc += OUTCOME_COEF[j] * zj;
            eta += PROPENSITY_COEF[j] * zj;
        }
        let e0: f64 = StandardNormal.sample(&mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        y0.push(loc + SD_CONTROL_NOISE * e0);
        y1.push(loc + SD_TREATED_NOISE * e1);
        ps.push(expit(eta));
    }
    (y0, y1, ps)
}
