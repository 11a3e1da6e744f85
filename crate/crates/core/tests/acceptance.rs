//! Acceptance gate. Prints one PASS/FAIL/SKIPPED line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The coverage study takes hours and only runs with `DSM_SLOW=1`. The
//! real-data check runs when the NSW/CPS-3 file is found at `$DSM_NSW_CPS3`
//! or `tests/fixtures/nsw_cps3.csv`.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dsm_core::balance::run_balance;
use dsm_core::config::{BootstrapConfig, Estimand, SchemaConfig};
use dsm_core::data::load_dataset;
use dsm_core::dgp::generate_scenario;
use dsm_core::matching::{match_group, MatchMap};
use dsm_core::mean::{dsm_ate_bias_correction, dsm_ate_initial};
use dsm_core::models::{
    fit_linear, fit_logistic, stacked_estimating_equation, DesignCache, FittedModels,
};
use dsm_core::quantile::{dsm_arm_cdf, dsm_cdf, CondCdfFit};
use dsm_core::sieve::fit_sieve;
use dsm_core::sim::{
    run_monte_carlo_with_truth, simulation_candidates, true_estimands, MCReport,
    ScenarioConfig,
};
use dsm_core::stats::expit;

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

// ---------------------------------------------------------------------------
// 1. exact identities
// ---------------------------------------------------------------------------

struct Instance {
    a: Vec<u8>,
    y: Vec<f64>,
    s0: DMatrix<f64>,
    s1: DMatrix<f64>,
    m: usize,
    degree: usize,
}

fn random_instance(rng: &mut ChaCha8Rng, ties: bool) -> Instance {
    loop {
        let n = rng.gen_range(8..=200);
        let m = rng.gen_range(1..=3);
        let dim = rng.gen_range(1..=3);
        let p: f64 = rng.gen_range(0.25..0.75);
        let a: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f64>() < p)).collect();
        let n1 = a.iter().filter(|&&v| v == 1).count();
        if n1 < m || n - n1 < m {
            continue;
        }
        let draw = |rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(n, dim, |_, _| {
                if ties {
                    f64::from(rng.gen_range(0..4u8))
                } else {
                    rng.sample::<f64, _>(StandardNormal)
                }
            })
        };
        let s0 = draw(rng);
        let s1 = draw(rng);
        let y = (0..n)
            .map(|i| s0[(i, 0)] + 0.5 * s1[(i, 0)] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        return Instance {
            a,
            y,
            s0,
            s1,
            m,
            degree: rng.gen_range(0..=2),
        };
    }
}

fn row(s: &DMatrix<f64>, i: usize) -> Vec<f64> {
    s.row(i).iter().copied().collect()
}

/// Exhaustive matching with ties broken by unit index.
fn brute_force_map(s: &DMatrix<f64>, a: &[u8], donor: u8, m: usize) -> Vec<Vec<usize>> {
    let donors: Vec<usize> = (0..a.len()).filter(|&i| a[i] == donor).collect();
    (0..a.len())
        .filter(|&i| a[i] != donor)
        .map(|i| {
            let qi = row(s, i);
            let mut d: Vec<(f64, usize)> = donors
                .iter()
                .map(|&j| {
                    let dist = row(s, j)
                        .iter()
                        .zip(&qi)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>();
                    (dist, j)
                })
                .collect();
            d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            d.iter().take(m).map(|p| p.1).collect()
        })
        .collect()
}

fn counted_k(map: &MatchMap, n: usize) -> Vec<f64> {
    let mut k = vec![0.0; n];
    for js in &map.matches {
        for &j in js {
            k[j] += 1.0;
        }
    }
    k.iter().map(|v| v / map.m as f64).collect()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_ate = 0.0f64;
    let mut worst_cdf = 0.0f64;
    let mut k_ok = true;
    let mut oracle_checked = 0;
    let mut oracle_ok = true;
    for inst_id in 0..100 {
        let inst = random_instance(&mut rng, inst_id % 4 == 3);
        let n = inst.y.len();
        let a = &inst.a;
        let y = &inst.y;
        let map0 = match_group(&inst.s0, a, 0, inst.m).expect("map0");
        let map1 = match_group(&inst.s1, a, 1, inst.m).expect("map1");

        for map in [&map0, &map1] {
            k_ok &= map.k.iter().sum::<usize>() == inst.m * map.queries.len();
        }
        if n <= 60 {
            oracle_checked += 1;
            oracle_ok &= map0.matches == brute_force_map(&inst.s0, a, 0, inst.m);
            oracle_ok &= map1.matches == brute_force_map(&inst.s1, a, 1, inst.m);
        }

        let ones = vec![1.0; n];
        let rows0: Vec<usize> = (0..n).filter(|&i| a[i] == 0).collect();
        let rows1: Vec<usize> = (0..n).filter(|&i| a[i] == 1).collect();
        let fit0 = fit_sieve(&inst.s0, y, &rows0, &ones, inst.degree).expect("sieve0");
        let fit1 = fit_sieve(&inst.s1, y, &rows1, &ones, inst.degree).expect("sieve1");
        let mu0 = &fit0.fitted;
        let mu1 = &fit1.fitted;

        let debiased = dsm_ate_initial(y, a, &map0, &map1)
            - dsm_ate_bias_correction(&map0, &map1, mu0, mu1);
        let k0 = counted_k(&map0, n);
        let k1 = counted_k(&map1, n);
        let mut closed = 0.0;
        for i in 0..n {
            closed += if a[i] == 1 {
                mu1[i] - mu0[i] + (1.0 + k1[i]) * (y[i] - mu1[i])
            } else {
                mu1[i] - mu0[i] - (1.0 + k0[i]) * (y[i] - mu0[i])
            };
        }
        closed /= n as f64;
        worst_ate = worst_ate.max((debiased - closed).abs());

        let lo = y.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
        for (arm, map, fit, k) in [(0u8, &map0, &fit0, &k0), (1u8, &map1, &fit1, &k1)] {
            let cond = CondCdfFit::from_sieve(arm, fit, None);
            let linear = dsm_arm_cdf(y, a, arm, &map.k_over_m(), &cond, None);
            for t in 0..50 {
                let q = if t % 5 == 0 {
                    y[rng.gen_range(0..n)]
                } else {
                    rng.gen_range(lo..hi)
                };
                let mut hand = 0.0;
                for i in 0..n {
                    let f = cond.eval(q, i);
                    hand += f;
                    if a[i] == arm {
                        let ind = if y[i] <= q { 1.0 } else { 0.0 };
                        hand += (1.0 + k[i]) * (ind - f);
                    }
                }
                hand /= n as f64;
                let matched = dsm_cdf(q, y, a, map, &cond).corrected;
                worst_cdf = worst_cdf
                    .max((matched - hand).abs())
                    .max((linear.eval(q) - hand).abs());
            }
        }
    }
    verdict(
        worst_ate <= 1e-10 && worst_cdf <= 1e-10 && k_ok && oracle_ok,
        format!(
            "max |ATE - linear| = {worst_ate:.2e}, max |CDF - linear| = {worst_cdf:.2e}, \
             sum K = M * queries: {k_ok}, brute-force agreement on {oracle_checked} \
             instances: {oracle_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. solver oracles
// ---------------------------------------------------------------------------

const FIXTURE_A: [u8; 20] = [1, 0, 0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 1, 0, 1, 1, 0, 0, 1, 1];

fn fixture_design() -> DMatrix<f64> {
    DMatrix::from_fn(20, 3, |i, j| match j {
        0 => 1.0,
        1 => (i as f64 - 9.5) / 5.0,
        _ => ((i * 7) % 11) as f64 / 5.0 - 1.0,
    })
}

fn fixture_outcome(x: &DMatrix<f64>) -> Vec<f64> {
    (0..20)
        .map(|i| 1.0 + 2.0 * x[(i, 1)] - x[(i, 2)] + (i as f64).cos())
        .collect()
}

fn newton_logistic(x: &DMatrix<f64>, a: &[u8], w: &[f64]) -> DVector<f64> {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    for _ in 0..200 {
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..x.nrows() {
            let xi = x.row(i).transpose();
            let pi = 1.0 / (1.0 + (-(xi.dot(&beta))).exp());
            grad += &xi * (w[i] * (f64::from(a[i]) - pi));
            hess += &xi * xi.transpose() * (w[i] * pi * (1.0 - pi));
        }
        let step = hess.lu().solve(&grad).expect("hessian solvable");
        beta += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    beta
}

fn normal_equations(x: &DMatrix<f64>, y: &[f64], mask: &[bool], w: &[f64]) -> (DVector<f64>, f64) {
    let p = x.ncols();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let mut wsum = 0.0;
    for i in 0..x.nrows() {
        if !mask[i] {
            continue;
        }
        let xi = x.row(i).transpose();
        xtx += &xi * xi.transpose() * w[i];
        xty += &xi * (w[i] * y[i]);
        wsum += w[i];
    }
    let beta = xtx.cholesky().expect("positive definite").solve(&xty);
    let mut rss = 0.0;
    for i in 0..x.nrows() {
        if mask[i] {
            let r = y[i] - x.row(i).transpose().dot(&beta);
            rss += w[i] * r * r;
        }
    }
    (beta, (rss / (wsum - p as f64)).sqrt())
}

fn criterion_2() -> Outcome {
    let x = fixture_design();
    let y = fixture_outcome(&x);
    let unit = vec![1.0; 20];
    let varied: Vec<f64> = (0..20).map(|i| 1.0 + (i % 3) as f64 / 2.0).collect();
    let mut logit_err = 0.0f64;
    let mut linear_err = 0.0f64;
    let mut converged = true;
    for w in [&unit, &varied] {
        let fit = fit_logistic(&x, &FIXTURE_A, w).expect("logistic fit");
        converged &= fit.converged;
        let oracle = newton_logistic(&x, &FIXTURE_A, w);
        for j in 0..3 {
            logit_err = logit_err.max((fit.alpha[j] - oracle[j]).abs());
        }
        for arm in [0u8, 1] {
            let mask: Vec<bool> = FIXTURE_A.iter().map(|&v| v == arm).collect();
            let fit = fit_linear(&x, &y, &mask, w).expect("linear fit");
            let (beta, sigma) = normal_equations(&x, &y, &mask, w);
            for j in 0..3 {
                linear_err = linear_err.max((fit.beta[j] - beta[j]).abs());
            }
            linear_err = linear_err.max((fit.sigma - sigma).abs());
        }
    }

    // Stacked equations at the fitted coefficients.
    let scen = generate_scenario(1000, 17, 0).expect("scenario");
    let d = &scen.dataset;
    let n = d.n();
    let cands = simulation_candidates();
    let designs = DesignCache::build(d, &cands).expect("designs");
    let mut ee_max = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let exp_w: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().ln()).collect();
    for w in [vec![1.0; n], exp_w] {
        let pool = FittedModels::fit(d, &designs, &cands, &w, None).expect("pool");
        converged &= pool.all_converged();
        let ee = stacked_estimating_equation(&pool.theta().flatten(), d, &designs, &cands, &w)
            .expect("stacked equation");
        // `ee` carries the n^{-1/2} factor, so |sum| < 1e-6 sqrt(n) iff |ee| < 1e-6.
        ee_max = ee.iter().fold(ee_max, |m, v| m.max(v.abs()));
    }

    // Hand sums at a perturbed coefficient vector.
    let pool = FittedModels::fit(d, &designs, &cands, &vec![1.0; n], None).expect("pool");
    let mut theta = pool.theta().flatten();
    for (t, v) in theta.iter_mut().enumerate() {
        *v += 0.01 * ((t % 5) as f64 - 2.0);
    }
    let ee = stacked_estimating_equation(&theta, d, &designs, &cands, &vec![1.0; n])
        .expect("stacked equation");
    let mut hand = Vec::new();
    let mut off = 0;
    let scale = 1.0 / (n as f64).sqrt();
    for &map in &cands.propensity {
        let dm = designs.get(map);
        let p = dm.ncols();
        for j in 0..p {
            let mut s = 0.0;
            for i in 0..n {
                let eta: f64 = (0..p).map(|c| dm[(i, c)] * theta[off + c]).sum();
                s += dm[(i, j)] * (f64::from(d.a()[i]) - expit(eta));
            }
            hand.push(s * scale);
        }
        off += p;
    }
    for arm in [0u8, 1] {
        for &map in &cands.prognostic {
            let dm = designs.get(map);
            let p = dm.ncols();
            for j in 0..p {
                let mut s = 0.0;
                for i in 0..n {
                    if d.a()[i] == arm {
                        let fit: f64 = (0..p).map(|c| dm[(i, c)] * theta[off + c]).sum();
                        s += dm[(i, j)] * (d.y()[i] - fit);
                    }
                }
                hand.push(s * scale);
            }
            off += p;
        }
    }
    let hand_err = ee
        .iter()
        .zip(&hand)
        .fold(0.0f64, |m, (u, v)| m.max((u - v).abs() / v.abs().max(1.0)));

    verdict(
        converged && logit_err < 1e-6 && linear_err < 1e-6 && ee_max < 1e-6 && hand_err < 1e-10,
        format!(
            "logistic vs Newton {logit_err:.2e}, linear vs normal equations {linear_err:.2e}, \
             max |n^-1/2 sum U(theta_hat)| = {ee_max:.2e}, perturbed hand sums {hand_err:.2e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 3-5. simulation criteria
// ---------------------------------------------------------------------------

const ROBUST_TAGS: [&str; 4] = ["dsm1010", "dsm0110", "dsm1001", "dsm1111"];
const PUBLISHED_QTE: f64 = -0.45;

fn mc(report: &MCReport, tag: &str, label: &str) -> (f64, f64) {
    let r = report.row(tag, label).expect("row present");
    (r.mean, r.mc_se)
}

fn criterion_3(truth: &dsm_core::sim::TrueEstimands) -> Outcome {
    let oracle_qte = truth.qte_at(0.75).expect("qte truth");
    let oracle_ok = (oracle_qte - PUBLISHED_QTE).abs() < 0.02;
    let mut tags: Vec<&str> = ROBUST_TAGS.to_vec();
    tags.push("dsm0101");
    let cfg = ScenarioConfig::new(1000, 500, 2024, &tags);
    let report = run_monte_carlo_with_truth(&cfg, truth.clone()).expect("simulation");
    let mut ok = oracle_ok;
    let mut parts = vec![format!("oracle QTE(0.75) = {oracle_qte:.4}")];
    for tag in ROBUST_TAGS {
        for label in ["ATE", "QTE(0.75)"] {
            let (mean, se) = mc(&report, tag, label);
            ok &= mean.abs() < 2.0 * se;
            parts.push(format!("{tag} {label} {:+.2} se", mean / se));
        }
        // Against the rounded published value as well, for the record.
        let (mean, se) = mc(&report, tag, "QTE(0.75)");
        parts.push(format!(
            "{tag} QTE vs -0.45 {:+.2} se",
            (mean + oracle_qte - PUBLISHED_QTE) / se
        ));
    }
    let (mean, se) = mc(&report, "dsm0101", "ATE");
    ok &= mean.abs() > 4.0 * se;
    parts.push(format!("dsm0101 ATE {:+.2} se", mean / se));
    verdict(ok, parts.join(", "))
}

fn criterion_4(truth: &dsm_core::sim::TrueEstimands) -> Outcome {
    if std::env::var("DSM_SLOW").as_deref() != Ok("1") {
        return Outcome::Skipped("set DSM_SLOW=1 to run the R=500, B=500 coverage study".into());
    }
    let mut tags: Vec<&str> = ROBUST_TAGS.to_vec();
    tags.push("dsm0101");
    let mut cfg = ScenarioConfig::new(1000, 500, 4096, &tags);
    cfg.bootstrap = Some(BootstrapConfig {
        replicates: 500,
        seed: 99,
        ..BootstrapConfig::default()
    });
    let report = run_monte_carlo_with_truth(&cfg, truth.clone()).expect("simulation");
    let rate = |tag: &str, label: &str| {
        report
            .row(tag, label)
            .and_then(|r| r.coverage.as_ref())
            .map(|c| c.rate)
            .expect("coverage present")
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for tag in ROBUST_TAGS {
        for label in ["ATE", "QTE(0.75)"] {
            let c = rate(tag, label);
            ok &= (92.5..=98.0).contains(&c);
            parts.push(format!("{tag} {label} {c:.1}"));
        }
    }
    let ate = rate("dsm0101", "ATE");
    let qte = rate("dsm0101", "QTE(0.75)");
    ok &= ate < 70.0 && qte < 88.0;
    parts.push(format!("dsm0101 ATE {ate:.1} QTE(0.75) {qte:.1}"));
    verdict(ok, parts.join(", "))
}

fn criterion_5(truth: &dsm_core::sim::TrueEstimands) -> Outcome {
    let mut cfg = ScenarioConfig::new(1000, 200, 2025, &["dsm1111", "ipw1000"]);
    cfg.estimands = vec![dsm_core::sim::SimEstimand::Ate];
    let report = run_monte_carlo_with_truth(&cfg, truth.clone()).expect("simulation");
    let dsm = report.row("dsm1111", "ATE").expect("dsm row");
    let ipw = report.row("ipw1000", "ATE").expect("ipw row");
    verdict(
        dsm.iqr < ipw.iqr,
        format!(
            "ATE error IQR dsm1111 {:.4} (sd {:.4}) vs ipw1000 {:.4} (sd {:.4})",
            dsm.iqr, dsm.sd, ipw.iqr, ipw.sd
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. NSW/CPS-3
// ---------------------------------------------------------------------------

fn nsw_fixture() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("DSM_NSW_CPS3") {
        return Some(PathBuf::from(p)).filter(|p| p.exists());
    }
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/nsw_cps3.csv");
    p.exists().then_some(p)
}

const NSW_CONFIG: &str = r#"
treatment_column = "treat"
outcome_column = "re78"
covariate_columns = ["age", "educ", "black", "hisp", "married", "nodegr", "re75"]
method = "dsm"
M = 1

[estimand]
kind = "ATT"

[bootstrap]
replicates = 2

[[models]]
kind = "propensity"
feature_map = "first-order-plus-squares-of-numeric"

[[models]]
kind = "prognostic"
feature_map = "first-order-plus-squares-of-numeric"
"#;

fn criterion_6() -> Outcome {
    let Some(path) = nsw_fixture() else {
        return Outcome::Skipped("NSW/CPS-3 fixture not present".into());
    };
    let cfg = SchemaConfig::from_toml_str(NSW_CONFIG).expect("config");
    let file = std::fs::File::open(&path).expect("fixture readable");
    let data = load_dataset(file, &cfg).expect("fixture parses");
    let prep = dsm_core::analysis::prepare(&data, &cfg).expect("estimation");
    let att = prep.estimator.values[0];
    let mut bal_cfg = cfg.clone();
    bal_cfg.estimand = Estimand::Att;
    let rows = run_balance(&data, &bal_cfg).expect("balance");
    let age = rows.iter().find(|r| r.covariate == "age").expect("age row");
    let worst_after = rows
        .iter()
        .map(|r| r.std_diff_after.abs())
        .fold(0.0f64, f64::max);
    verdict(
        (943.0..=1233.0).contains(&att)
            && (age.std_diff_before + 0.19).abs() <= 0.01
            && worst_after <= 0.07,
        format!(
            "ATT {att:.1}, age std diff before {:.3}, max |std diff| after {worst_after:.3}",
            age.std_diff_before
        ),
    )
}

fn main() {
    let mut failed = false;
    let mut report = |id: u32, name: &str, t: Instant, out: Outcome| {
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match out {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed = true;
                ("FAIL", d)
            }
            Outcome::Skipped(d) => ("SKIPPED", d),
        };
        println!("criterion {id} ({name}): {tag} [{secs:.1}s] {detail}");
    };

    let t = Instant::now();
    report(1, "exact identities", t, criterion_1());
    let t = Instant::now();
    report(2, "solver oracles", t, criterion_2());

    let truth = true_estimands(&[0.75], 10_000_000, 0);
    let t = Instant::now();
    report(3, "truth recovery", t, criterion_3(&truth));
    let t = Instant::now();
    report(4, "bootstrap coverage", t, criterion_4(&truth));
    let t = Instant::now();
    report(5, "robustness contrast", t, criterion_5(&truth));
    let t = Instant::now();
    report(6, "NSW/CPS-3 reproduction", t, criterion_6());

    if failed {
        std::process::exit(1);
    }
}
