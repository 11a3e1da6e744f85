use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsm_core::config::Estimand;
use dsm_core::data::Dataset;
use dsm_core::design::FeatureMap;
use dsm_core::dgp::generate_scenario;
use dsm_core::estimator::{EstimationOptions, EstimatorSpec, FittedEstimator};
use dsm_core::matching::match_group;
use dsm_core::mean::{ate_linear_form, donor_k_over_m, dsm_ate};
use dsm_core::models::{CandidateModels, DesignCache, FittedModels, ScoreSet};
use dsm_core::sieve::fit_sieve;
use dsm_core::sim::simulation_candidates;

fn options(estimand: Estimand) -> EstimationOptions {
    EstimationOptions {
        estimand,
        m: 1,
        sieve_degree: 2,
        boxcox: None,
        freeze_sieve: false,
    }
}

struct Setup {
    data: Dataset,
    designs: DesignCache,
    pool: FittedModels,
}

fn setup(n: usize, rep: u64) -> Setup {
    let data = generate_scenario(n, 31, rep).unwrap().dataset;
    let cands = simulation_candidates();
    let designs = DesignCache::build(&data, &cands).unwrap();
    let pool = FittedModels::fit(&data, &designs, &cands, &vec![1.0; n], None).unwrap();
    Setup { data, designs, pool }
}

fn exp_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| -rng.gen::<f64>().ln()).collect()
}

#[test]
fn unit_weight_replicate_reproduces_the_point_estimate() {
    let s = setup(300, 0);
    let n = s.data.n();
    let ones = vec![1.0; n];
    let refit = FittedModels::fit(&s.data, &s.designs, &s.pool.candidates, &ones, Some(&s.pool)).unwrap();
    let tags = ["dsm1111", "dsm1010", "dsm0101", "psm1000", "pgm0010", "m.x", "naive", "ipw1000", "aipw1010"];
    let estimands = [
        Estimand::Ate,
        Estimand::Att,
        Estimand::Qte { xi: vec![0.25, 0.75] },
        Estimand::Qtt { xi: vec![0.5] },
    ];
    for tag in tags {
        for e in &estimands {
            let spec = EstimatorSpec::parse_tag(tag).unwrap();
            let est = FittedEstimator::fit(&spec, &s.data, &s.pool, &options(e.clone())).unwrap();
            let rep = est.replicate(&s.data, &refit, &ones).unwrap();
            for (p, r) in est.values.iter().zip(&rep) {
                assert!((p - r).abs() < 1e-6, "{tag} {e:?}: point {p} replicate {r}");
            }
        }
    }
}

#[test]
fn replicate_keeps_point_match_counts() {
    let s = setup(400, 1);
    let n = s.data.n();
    let (ps, pg) = (vec![0, 1], vec![0, 1]);
    let spec = EstimatorSpec::parse_tag("dsm1111").unwrap();
    let est = FittedEstimator::fit(&spec, &s.data, &s.pool, &options(Estimand::Ate)).unwrap();

    let point_scores = ScoreSet::from_models(&s.pool, &ps, &pg, None).unwrap();
    let a = s.data.a();
    let map0 = match_group(&point_scores.s0, a, 0, 1).unwrap();
    let map1 = match_group(&point_scores.s1, a, 1, 1).unwrap();
    let k = donor_k_over_m(&[&map0, &map1], n);

    let w = exp_weights(n, 5);
    let refit = FittedModels::fit(&s.data, &s.designs, &s.pool.candidates, &w, Some(&s.pool)).unwrap();
    let scores = ScoreSet::from_models(
        &refit,
        &ps,
        &pg,
        Some((&point_scores.std0, &point_scores.std1)),
    )
    .unwrap();
    let y = s.data.y();
    let mu0 = fit_sieve(&scores.s0, y, &s.data.arm_indices(0), &w, 2).unwrap().fitted;
    let mu1 = fit_sieve(&scores.s1, y, &s.data.arm_indices(1), &w, 2).unwrap().fitted;
    let expected = ate_linear_form(y, a, &k, &mu0, &mu1, Some(&w));
    let got = est.replicate(&s.data, &refit, &w).unwrap()[0];
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

    // Re-matching on the replicate scores would give different counts.
    let rematched = donor_k_over_m(
        &[
            &match_group(&scores.s0, a, 0, 1).unwrap(),
            &match_group(&scores.s1, a, 1, 1).unwrap(),
        ],
        n,
    );
    assert_ne!(rematched, k);
}

#[test]
fn constant_outcome_gives_zero_effects_in_every_replicate() {
    let s = setup(250, 2);
    let n = s.data.n();
    let data = s.data.with_outcome(vec![3.0; n]).unwrap();
    let cands = simulation_candidates();
    let pool = FittedModels::fit(&data, &s.designs, &cands, &vec![1.0; n], None).unwrap();
    let spec = EstimatorSpec::parse_tag("dsm1111").unwrap();
    for e in [Estimand::Ate, Estimand::Qte { xi: vec![0.5] }, Estimand::Att] {
        let est = FittedEstimator::fit(&spec, &data, &pool, &options(e.clone())).unwrap();
        assert!(est.values[0].abs() < 1e-9, "{e:?}");
        for seed in 0..3 {
            let w = exp_weights(n, seed);
            let refit = FittedModels::fit(&data, &s.designs, &cands, &w, Some(&pool)).unwrap();
            let r = est.replicate(&data, &refit, &w).unwrap();
            assert!(r[0].abs() < 1e-9, "{e:?} replicate {}", r[0]);
        }
    }
}

#[test]
fn frozen_sieve_matches_refit_under_unit_weights() {
    let s = setup(300, 3);
    let ones = vec![1.0; s.data.n()];
    let spec = EstimatorSpec::parse_tag("dsm1010").unwrap();
    let mut opts = options(Estimand::Qte { xi: vec![0.75] });
    let refit_est = FittedEstimator::fit(&spec, &s.data, &s.pool, &opts).unwrap();
    opts.freeze_sieve = true;
    let frozen_est = FittedEstimator::fit(&spec, &s.data, &s.pool, &opts).unwrap();
    let a = refit_est.replicate(&s.data, &s.pool, &ones).unwrap();
    let b = frozen_est.replicate(&s.data, &s.pool, &ones).unwrap();
    assert_eq!(a, b);
}

#[test]
fn duplicated_propensity_candidates_give_identical_columns() {
    let s = setup(300, 4);
    let cands = CandidateModels::new(vec![FeatureMap::SimulationZ, FeatureMap::SimulationZ], vec![]);
    let designs = DesignCache::build(&s.data, &cands).unwrap();
    let pool = FittedModels::fit(&s.data, &designs, &cands, &vec![1.0; s.data.n()], None).unwrap();
    assert_eq!(pool.logit_e[0], pool.logit_e[1]);

    // Doubling a column scales every distance by the same factor, so the
    // matches and the estimate are those of the single score.
    let one = ScoreSet::from_models(&pool, &[0], &[], None).unwrap();
    let two = ScoreSet::from_models(&pool, &[0, 1], &[], None).unwrap();
    let a = dsm_ate(&s.data, &one, 1, 2).unwrap().value;
    let b = dsm_ate(&s.data, &two, 1, 2).unwrap().value;
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn constant_prognostic_column_reduces_to_propensity_matching() {
    let s = setup(300, 5);
    let n = s.data.n();
    let logit: Vec<f64> = s.pool.logit_e[0].clone();
    let single = DMatrix::from_column_slice(n, 1, &logit);
    let mut padded = DMatrix::from_element(n, 2, 7.0);
    padded.set_column(0, &single.column(0));
    let psm = ScoreSet::from_raw(single.clone(), single, 1).unwrap();
    let dsm = ScoreSet::from_raw(padded.clone(), padded, 1).unwrap();
    let a = dsm_ate(&s.data, &psm, 1, 2).unwrap();
    let b = dsm_ate(&s.data, &dsm, 1, 2).unwrap();
    assert!((a.value - b.value).abs() < 1e-9, "{} vs {}", a.value, b.value);
    assert!((a.initial.unwrap() - b.initial.unwrap()).abs() < 1e-12);
}
