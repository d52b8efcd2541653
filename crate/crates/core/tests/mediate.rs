use std::collections::BTreeMap;

use mediation_core::glm::{wald_test, Family, ModelSpec};
use mediation_core::mediate::{
    adjusted_direct, adjusted_regression_fit, ate_diff_means, conditional_estimate, estimate,
    potential_outcome_grid, quasi_p, scale_per_day, BaselineOptions,
};
use mediation_core::sim::{default_scenario, simulate, ScenarioConfig};
use mediation_core::{stats, Dataset, EffectEstimate, Error, MediationConfig, MediationResult, Seed};

fn scenario(n: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_units: n,
        ..default_scenario()
    }
}

fn data(n: u64, seed: u64) -> Dataset {
    simulate(&scenario(n), Seed(seed)).unwrap()
}

fn config(draws: usize) -> MediationConfig {
    let mut c = MediationConfig::new(&["business"]);
    c.n_param_draws = draws;
    c
}

fn at(level: f64) -> Option<BTreeMap<String, f64>> {
    Some([("business".to_string(), level)].into())
}

fn estimates(r: &MediationResult) -> [&EffectEstimate; 7] {
    [&r.ate, &r.acme[0], &r.acme[1], &r.ade[0], &r.ade[1], &r.acme_avg, &r.ade_avg]
}

#[test]
fn decomposition_is_exact_for_every_draw() {
    let ds = data(20_000, 1);
    let r = estimate(&ds, &config(200), Seed(2)).unwrap();
    assert_eq!(r.draws.len(), 200);
    for (j, d) in r.draws.iter().enumerate() {
        for t in 0..2 {
            assert_eq!(d.ate(), d.acme(t) + d.ade(1 - t), "draw {j}, t = {t}");
        }
        assert_eq!(r.ate.draws[j], d.ate());
    }
}

#[test]
fn grid_uses_one_mediator_draw_for_all_outcomes() {
    let ds = data(500, 3);
    let g = potential_outcome_grid(&ds, &config(100), Seed(4), 7).unwrap();
    let n = ds.len();
    assert_eq!(g.mediators[0].len(), 1);
    assert_eq!(g.mediators[1][0].len(), n);
    for t in 0..2 {
        for tp in 0..2 {
            assert_eq!(g.outcomes[t][tp].len(), n);
        }
    }
    // Same draw index, same grid.
    assert_eq!(g, potential_outcome_grid(&ds, &config(100), Seed(4), 7).unwrap());
}

#[test]
fn no_mediator_dependence_means_no_indirect_effect() {
    let ds = data(5_000, 5);
    let (m, _) = ModelSpec::default_pair(&["business"], true);
    let y = ModelSpec::outcome_model(Family::Gaussian, &["business"], true, false, None);
    let mut c = MediationConfig::with_specs(m, y);
    c.n_param_draws = 100;
    let r = estimate(&ds, &c, Seed(6)).unwrap();
    for d in &r.draws {
        assert_eq!(d.acme(0), 0.0);
        assert_eq!(d.acme(1), 0.0);
    }
    assert_eq!(r.acme_avg.point, 0.0);
}

#[test]
fn ate_agrees_with_difference_in_means() {
    let ds = data(30_000, 7);
    let r = estimate(&ds, &config(300), Seed(8)).unwrap();
    let dm = ate_diff_means(&ds, &BaselineOptions::default()).unwrap();
    let mc_se = stats::sd(&r.ate.draws);
    assert!((r.ate.point - dm.point).abs() < 3.0 * mc_se, "{} vs {}", r.ate.point, dm.point);
    assert!(r.acme_avg.point / r.ate.point > 0.9);
}

#[test]
fn intervals_and_p_values_agree() {
    let ds = data(10_000, 9);
    let r = estimate(&ds, &config(200), Seed(10)).unwrap();
    for e in estimates(&r) {
        assert!(e.ci_low <= e.point && e.point <= e.ci_high, "{e:?}");
        let has_zero_draw = e.draws.contains(&0.0);
        if !has_zero_draw {
            assert_eq!(e.p_value < 0.05, !e.contains_zero(), "{e:?}");
        }
        assert_eq!(e.per_day, scale_per_day(e.point, 10_000.0, 30.0));
    }
}

#[test]
fn null_scenario_subgroup_effects_contain_zero() {
    let mut cfg = scenario(20_000);
    for c in &mut cfg.cells {
        c.booking_rate = 1.5;
        c.cancel_prob = 0.1;
    }
    let ds = simulate(&cfg, Seed(11)).unwrap();
    for level in [0.0, 1.0] {
        let mut c = config(200);
        c.conditional_at = at(level);
        let r = conditional_estimate(&ds, &c, Seed(12)).unwrap();
        assert!(r.ade_avg.contains_zero(), "business={level}: {:?}", r.ade_avg);
        assert!(r.acme_avg.contains_zero(), "business={level}: {:?}", r.acme_avg);
    }
}

#[test]
fn subgroup_scaling_uses_subgroup_size() {
    let ds = data(5_000, 13);
    let mut c = config(100);
    c.conditional_at = at(1.0);
    let r = conditional_estimate(&ds, &c, Seed(14)).unwrap();
    let n_business = ds.records().iter().filter(|r| r.covariates[0] == 1.0).count();
    assert_eq!(r.n_units, n_business);
    assert_eq!(r.population, n_business as f64);
    let json = r.to_json();
    assert_eq!(json["config"]["population_convention"], "subgroup size");
}

#[test]
fn result_is_independent_of_worker_count() {
    let ds = data(5_000, 15);
    let mut c = config(120);
    c.workers = Some(1);
    let a = estimate(&ds, &c, Seed(16)).unwrap();
    c.workers = Some(8);
    let b = estimate(&ds, &c, Seed(16)).unwrap();
    assert_eq!(a.draws, b.draws);
    assert_eq!(a.to_json().to_string(), b.to_json().to_string());
}

#[test]
fn monte_carlo_jitter_shrinks_with_more_draws() {
    let ds = data(4_000, 17);
    let jitter = |draws: usize| -> f64 {
        let runs: Vec<MediationResult> =
            (0..10).map(|s| estimate(&ds, &config(draws), Seed(100 + s)).unwrap()).collect();
        let endpoint_sd = |f: &dyn Fn(&MediationResult) -> f64| stats::sd(&runs.iter().map(f).collect::<Vec<_>>());
        [
            endpoint_sd(&|r| r.ate.ci_low),
            endpoint_sd(&|r| r.ate.ci_high),
            endpoint_sd(&|r| r.acme_avg.ci_low),
            endpoint_sd(&|r| r.acme_avg.ci_high),
            endpoint_sd(&|r| r.ade_avg.ci_low),
            endpoint_sd(&|r| r.ade_avg.ci_high),
        ]
        .iter()
        .sum()
    };
    let (j1, j2) = (jitter(100), jitter(200));
    assert!(j2 < j1, "jitter {j1} at J=100, {j2} at J=200");
}

#[test]
fn config_errors_surface_before_work() {
    let ds = data(100, 18);
    assert!(matches!(estimate(&ds, &config(50), Seed(0)), Err(Error::Config(_))));
    let mut c = config(100);
    c.ci_level = 1.0;
    assert!(matches!(estimate(&ds, &c, Seed(0)), Err(Error::Config(_))));
    assert!(matches!(conditional_estimate(&ds, &config(100), Seed(0)), Err(Error::Config(_))));
    let mut c = config(100);
    c.conditional_at = Some([("age".to_string(), 1.0)].into());
    assert!(conditional_estimate(&ds, &c, Seed(0)).is_err());
}

#[test]
fn empty_subgroup_is_an_estimation_error() {
    let mut cfg = scenario(2_000);
    cfg.p_covariate = 0.0;
    let ds = simulate(&cfg, Seed(19)).unwrap();
    let (m, y) = ModelSpec::default_pair(&[], true);
    let mut c = MediationConfig::with_specs(m, y);
    c.n_param_draws = 100;
    assert!(estimate(&ds, &c, Seed(0)).is_ok());
    let mut c = config(100);
    c.conditional_at = at(1.0);
    let err = conditional_estimate(&ds, &c, Seed(0)).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}

#[test]
fn result_json_has_exact_keys() {
    let ds = data(2_000, 20);
    let r = estimate(&ds, &config(100), Seed(21)).unwrap();
    let v = r.to_json();
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["acme_0", "acme_1", "acme_avg", "ade_0", "ade_1", "ade_avg", "ate", "config", "seed"]);
    for k in ["ate", "acme_0", "ade_avg"] {
        for field in ["point", "ci_low", "ci_high", "p_value", "per_day"] {
            assert!(v[k][field].is_number(), "{k}.{field}");
        }
    }
    assert_eq!(v["seed"], 21);
}

#[test]
fn quasi_p_examples() {
    assert_eq!(quasi_p(&[1.0, 2.0]), 0.0);
    let mut draws = vec![-1.0; 32];
    draws.extend(vec![1.0; 68]);
    assert!((quasi_p(&draws) - 0.64).abs() < 1e-12);
    assert_eq!(quasi_p(&[-1.0, 1.0]), 1.0);
    assert_eq!(scale_per_day(0.0, 1e5, 30.0), 0.0);
    assert_eq!(scale_per_day(0.7, 1.0, 1.0), 0.7);
    assert!((scale_per_day(0.112, 100_000.0, 30.0) - 373.333).abs() < 1e-3);
}

#[test]
fn difference_in_means_on_default_scenario() {
    let ds = data(100_000, 22);
    let e = ate_diff_means(&ds, &BaselineOptions::default()).unwrap();
    let se = e.std_error.unwrap();
    assert!((e.point - 0.112).abs() < 5.0 * se);
    assert!((345.0..=405.0).contains(&e.per_day), "{}", e.per_day);
    assert!(e.p_value < 0.01);
}

#[test]
fn identical_arms_give_zero_difference() {
    let ds = data(1_000, 23);
    let mut records: Vec<_> = ds.records().to_vec();
    let n = records.len() as u64;
    let flipped: Vec<_> = records
        .iter()
        .map(|r| mediation_core::ExperimentRecord {
            unit_id: r.unit_id + n,
            treatment: 1 - r.treatment,
            ..r.clone()
        })
        .collect();
    records.extend(flipped);
    let ds = Dataset::new(ds.schema().to_vec(), records).unwrap();
    let e = ate_diff_means(&ds, &BaselineOptions::default()).unwrap();
    assert!(e.point.abs() < 1e-15);
}

#[test]
fn single_arm_is_an_error() {
    let mut cfg = scenario(100);
    cfg.p_treatment = 1.0;
    let ds = simulate(&cfg, Seed(24)).unwrap();
    assert!(matches!(ate_diff_means(&ds, &BaselineOptions::default()), Err(Error::Estimation(_))));
    assert!(adjusted_direct(&ds, true, &BaselineOptions::default()).is_err());
}

#[test]
fn adjusted_regression_is_biased_by_the_confounder() {
    let ds = data(100_000, 25);
    let opts = BaselineOptions::default();
    let e = adjusted_direct(&ds, true, &opts).unwrap();
    let ate = ate_diff_means(&ds, &opts).unwrap();
    assert!(e.point > 0.0 && e.point < ate.point);
    assert!(e.p_value < 0.01);

    // Population-moment value of the bookings coefficient.
    let fit = adjusted_regression_fit(&ds, true).unwrap();
    let w = wald_test(&fit, "mediator").unwrap();
    assert!((w.estimate - 0.114_390_24).abs() < 5.0 * w.std_error, "{w:?}");
    let bookings: u64 = ds.records().iter().map(|r| r.mediator).sum();
    let cancels: u64 = ds.records().iter().map(|r| r.outcome).sum();
    let pooled = cancels as f64 / bookings as f64;
    assert!((w.estimate - pooled).abs() < 0.01, "{} vs pooled {pooled}", w.estimate);
}

#[test]
fn adjusted_regression_is_unbiased_without_confounding() {
    let mut cfg = scenario(50_000);
    for c in &mut cfg.cells {
        c.booking_rate = if c.treatment == 1 { 2.0 } else { 1.0 };
        c.cancel_prob = 0.1;
    }
    let ds = simulate(&cfg, Seed(26)).unwrap();
    let e = adjusted_direct(&ds, true, &BaselineOptions::default()).unwrap();
    assert!(e.point.abs() < 3.0 * e.std_error.unwrap(), "{e:?}");
}
