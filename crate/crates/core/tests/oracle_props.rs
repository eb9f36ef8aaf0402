mod common;

use std::collections::BTreeMap;

use common::*;
use portrait_core::diffusion::{LatentGrid, NoiseRng, NoiseSchedule};
use portrait_core::oracle::{ComponentSpec, ConditionSpec, CovarianceSpec, GmmScoreModel, GmmSpec};
use portrait_core::synth::{default_oracle_spec, TWO_MODE_ORACLE_JSON};
use portrait_core::{diffusion::Condition, diffusion::Denoiser, Error};
use proptest::prelude::*;

fn default_model() -> GmmScoreModel {
    GmmScoreModel::from_spec(&default_oracle_spec()).unwrap()
}

#[test]
fn eps_matches_finite_differences() {
    let s = NoiseSchedule::default();
    let mut rng = NoiseRng::new(11);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let dims = 1 + index_below(&mut rng, 4);
        let k = 1 + index_below(&mut rng, 4);
        let m = random_model(&mut rng, dims, k, 2);
        let t = index_below(&mut rng, s.len());
        let c = if trial % 3 == 0 { None } else { Some(format!("c{}", trial % 2)) };
        let c = c.as_deref();
        let z = typical_point(&mut rng, &m, s.alpha_bar(t));
        let eps = m.eps(&z, t, c, &s).unwrap();
        let fd: Vec<f64> = (0..dims)
            .map(|i| {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[i] += h;
                zm[i] -= h;
                let d = m.log_density(&zp, t, c, &s).unwrap() - m.log_density(&zm, t, c, &s).unwrap();
                -s.sigma(t) * d / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = eps.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&eps).max(1e-3);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn bayes_identity_on_random_points() {
    let s = NoiseSchedule::default();
    let mut rng = NoiseRng::new(12);
    for _ in 0..100 {
        let m = random_model(&mut rng, 3, 3, 3);
        let t = index_below(&mut rng, s.len());
        let z = typical_point(&mut rng, &m, s.alpha_bar(t));
        let ab = s.alpha_bar(t);
        for c in ["c0", "c1", "c2"] {
            let g = m.log_posterior_grad(&z, t, c, &s).unwrap();
            let cond = m.score(&z, t, Some(c), &s).unwrap();
            let marg = m.score(&z, t, None, &s).unwrap();
            let diff: Vec<f64> = cond.iter().zip(&marg).map(|(a, b)| a - b).collect();
            assert!(max_abs_diff(&g, &diff) < 1e-9);
            let naive_c = NaiveMixture::from_model(&m, Some(c)).score(&z, ab);
            let naive_m = NaiveMixture::from_model(&m, None).score(&z, ab);
            let naive: Vec<f64> = naive_c.iter().zip(&naive_m).map(|(a, b)| a - b).collect();
            assert!(max_abs_diff(&g, &naive) < 1e-9);
        }
    }
}

#[test]
fn log_density_matches_naive_sum() {
    let s = NoiseSchedule::default();
    let mut rng = NoiseRng::new(13);
    for _ in 0..200 {
        let m = random_model(&mut rng, 2, 3, 1);
        let t = index_below(&mut rng, s.len());
        let ab = s.alpha_bar(t);
        let z = typical_point(&mut rng, &m, ab);
        for c in [None, Some("c0")] {
            let naive = NaiveMixture::from_model(&m, c).density(&z, ab).ln();
            let lse = m.log_density(&z, t, c, &s).unwrap();
            assert!((naive - lse).abs() < 1e-12, "{naive} vs {lse}");
        }
    }
}

#[test]
fn closed_form_score_matches_naive_score() {
    let s = NoiseSchedule::default();
    let mut rng = NoiseRng::new(14);
    for _ in 0..200 {
        let m = random_model(&mut rng, 3, 4, 2);
        let t = index_below(&mut rng, s.len());
        let ab = s.alpha_bar(t);
        let z = typical_point(&mut rng, &m, ab);
        let got = m.score(&z, t, Some("c1"), &s).unwrap();
        let want = NaiveMixture::from_model(&m, Some("c1")).score(&z, ab);
        assert!(max_abs_diff(&got, &want) < 1e-9 * norm(&want).max(1.0));
    }
}

#[test]
fn identical_condition_weights_give_prior_posterior() {
    let s = NoiseSchedule::default();
    let w = vec![0.25, 0.5, 0.25];
    let spec = GmmSpec {
        dims: 2,
        components: vec![
            ComponentSpec { weight: None, mean: vec![1.0, 0.0], covariance: CovarianceSpec::Isotropic(0.4) },
            ComponentSpec { weight: None, mean: vec![-1.0, 2.0], covariance: CovarianceSpec::Diagonal(vec![0.3, 0.9]) },
            ComponentSpec { weight: None, mean: vec![0.0, -2.0], covariance: CovarianceSpec::Isotropic(1.0) },
        ],
        conditions: BTreeMap::from([
            ("x".to_string(), ConditionSpec { prior: 0.3, weights: w.clone() }),
            ("y".to_string(), ConditionSpec { prior: 0.7, weights: w }),
        ]),
    };
    let m = GmmScoreModel::from_spec(&spec).unwrap();
    let mut rng = NoiseRng::new(15);
    for _ in 0..100 {
        let t = index_below(&mut rng, s.len());
        let z = typical_point(&mut rng, &m, s.alpha_bar(t));
        assert!((m.posterior(&z, t, "x", &s).unwrap() - 0.3).abs() < 1e-12);
        assert!((m.posterior(&z, t, "y", &s).unwrap() - 0.7).abs() < 1e-12);
    }
}

#[test]
fn posterior_rises_monotonically_into_exclusive_basin() {
    let s = NoiseSchedule::default();
    let spec = GmmSpec {
        dims: 2,
        components: vec![
            ComponentSpec { weight: None, mean: vec![2.0, 1.0], covariance: CovarianceSpec::Isotropic(0.5) },
            ComponentSpec { weight: None, mean: vec![-2.0, -1.0], covariance: CovarianceSpec::Isotropic(0.5) },
        ],
        conditions: BTreeMap::from([
            ("near".to_string(), ConditionSpec { prior: 0.5, weights: vec![1.0, 0.0] }),
            ("far".to_string(), ConditionSpec { prior: 0.5, weights: vec![0.0, 1.0] }),
        ]),
    };
    let m = GmmScoreModel::from_spec(&spec).unwrap();
    for t in [0, 399, 699] {
        let mut last = 0.0;
        for i in 0..=408 {
            let r = -2.0 + 0.25 * i as f64;
            let z = [r * 2.0, r];
            let p = m.posterior(&z, t, "near", &s).unwrap();
            // Strictly rising until the posterior saturates at 1 in f64.
            assert!(p > last || (last > 1.0 - 1e-9 && p >= last), "t={t} r={r}: {p} after {last}");
            last = p;
        }
        assert!(last > 1.0 - 1e-6, "t={t}: end of ray posterior {last}");
    }
}

#[test]
fn shipped_fixture_has_expected_shape() {
    let m = default_model();
    assert_eq!(m.dims(), 2);
    assert_eq!(m.component_count(), 3);
    let ids: Vec<&str> = m.condition_ids().collect();
    assert_eq!(ids, ["a", "b", "closed", "open"]);
    // Marginal weights are the prior mixture of the condition weights.
    let marg = m.weights(None).unwrap();
    assert!((marg[0] - 0.38).abs() < 1e-12);
    assert!((marg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn corrupted_fixture_reports_field_path() {
    let text = include_str!("../fixtures/oracle/corrupted.json");
    match GmmScoreModel::from_json(text) {
        Err(Error::Validation { field, .. }) => assert!(field.starts_with("components["), "{field}"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn adapter_round_trips_and_matches_eps() {
    let s = NoiseSchedule::default();
    let m = default_model();
    let d = m.as_denoiser(&s);
    let z = LatentGrid::new(1, 2, 1, vec![0.37, -1.25]).unwrap();
    let flat = z.data().to_vec();
    assert_eq!(LatentGrid::new(1, 2, 1, flat.clone()).unwrap(), z);
    for (cond, id) in [(Condition::Unconditional, None), (Condition::concept("open"), Some("open"))] {
        let got = d.predict(&z, 500, &cond).unwrap();
        assert_eq!(got.data(), m.eps(&flat, 500, id, &s).unwrap().as_slice());
    }
    assert!(matches!(
        d.predict(&z, 500, &Condition::concept("nope")),
        Err(Error::UnknownCondition(_))
    ));
}

/// Kernel density estimate of forward-diffused two-mode samples against the
/// closed-form diffused density smoothed by the same kernel.
#[test]
fn diffused_density_matches_monte_carlo_in_1d() {
    let s = NoiseSchedule::default();
    let m = GmmScoreModel::from_json(TWO_MODE_ORACLE_JSON).unwrap();
    let spec = m.to_spec();
    let mut rng = NoiseRng::new(16);
    let n = 200_000;
    let bw = 0.08;
    for t in [99, 399, 699] {
        let ab = s.alpha_bar(t);
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let comp = &spec.components[usize::from(rng.uniform() >= 0.5)];
                let v = match comp.covariance {
                    CovarianceSpec::Isotropic(v) => v,
                    CovarianceSpec::Diagonal(ref d) => d[0],
                };
                let x0 = comp.mean[0] + v.sqrt() * rng.standard_normal();
                ab.sqrt() * x0 + (1.0 - ab).sqrt() * rng.standard_normal()
            })
            .collect();
        for i in 0..=20 {
            let x = -3.0 + 0.3 * i as f64;
            let kde: f64 = samples
                .iter()
                .map(|y| (-(x - y).powi(2) / (2.0 * bw * bw)).exp())
                .sum::<f64>()
                / (n as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
            // E[kde] = p_t convolved with N(0, bw^2): widen each component.
            let smoothed: f64 = spec
                .components
                .iter()
                .map(|c| {
                    let v = match c.covariance {
                        CovarianceSpec::Isotropic(v) => v,
                        CovarianceSpec::Diagonal(ref d) => d[0],
                    };
                    let var = ab * v + 1.0 - ab + bw * bw;
                    0.5 * (-(x - ab.sqrt() * c.mean[0]).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
                })
                .sum();
            let se = (smoothed / (n as f64 * 2.0 * bw * std::f64::consts::PI.sqrt())).sqrt();
            assert!((kde - smoothed).abs() < 5.0 * se + 1e-4, "t={t} x={x}: kde {kde} vs {smoothed}");
            // Sanity: the smoothed value tracks the unsmoothed oracle density.
            let p = m.log_density(&[x], t, None, &s).unwrap().exp();
            assert!((p - smoothed).abs() < 0.05);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn posteriors_sum_to_one(seed in any::<u64>(), t in 0usize..1000) {
        let s = NoiseSchedule::default();
        let mut rng = NoiseRng::new(seed);
        let m = random_model(&mut rng, 2, 3, 4);
        let z = typical_point(&mut rng, &m, s.alpha_bar(t));
        let total: f64 = (0..4).map(|i| m.posterior(&z, t, &format!("c{i}"), &s).unwrap()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "sum {}", total);
    }

    #[test]
    fn posterior_in_unit_interval(seed in any::<u64>(), t in 0usize..1000) {
        let s = NoiseSchedule::default();
        let mut rng = NoiseRng::new(seed);
        let m = random_model(&mut rng, 3, 2, 2);
        let z = typical_point(&mut rng, &m, s.alpha_bar(t));
        let p = m.posterior(&z, t, "c0", &s).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn spec_round_trip_preserves_model(seed in any::<u64>()) {
        let mut rng = NoiseRng::new(seed);
        let m = random_model(&mut rng, 2, 3, 2);
        let json = serde_json::to_string(&m.to_spec()).unwrap();
        let back = GmmScoreModel::from_json(&json).unwrap();
        prop_assert_eq!(back.to_spec(), m.to_spec());
    }
}
