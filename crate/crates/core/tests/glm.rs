use mediation_core::glm::{
    build_design, draw_params, fit_irls, log_likelihood, predict_mean, score, Column, DesignMatrix, Family,
    IrlsOptions, ModelSpec, OverrideValue, Overrides, Response, Term,
};
use mediation_core::rng::{self, substream};
use mediation_core::sim::{default_scenario, simulate};
use mediation_core::{Covariate, Dataset, Error, ExperimentRecord, Seed};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal<R: Rng>(r: &mut R) -> f64 {
    StandardNormal.sample(r)
}

fn manual(family: Family, x: DMatrix<f64>, y: Vec<f64>, trials: Option<Vec<f64>>) -> DesignMatrix {
    let (n, p) = x.shape();
    let mut terms = vec![Term::Intercept];
    terms.extend((1..p).map(|j| Term::Main(Column::covariate(format!("x{j}")))));
    DesignMatrix {
        spec: ModelSpec {
            response: Response::Outcome,
            terms: terms.clone(),
            family,
            trials: trials.as_ref().map(|_| Column::Mediator),
        },
        columns: terms.iter().map(Term::name).collect(),
        x,
        y: DVector::from_vec(y),
        trials: trials.map(DVector::from_vec),
        mask: vec![false; n],
        weights: None,
    }
}

fn random_x<R: Rng>(r: &mut R, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { normal(r) })
}

/// Poisson mediator / binomial outcome data with numeric covariate `x`.
fn count_dataset(n: usize, beta_m: [f64; 3], beta_y: [f64; 3], seed: u64) -> Dataset {
    let records = (0..n)
        .map(|i| {
            let mut r = substream(Seed(seed), 99, i as u64);
            let t = rng::bernoulli(&mut r, 0.5) as u8;
            let x: f64 = normal(&mut r) * 0.5;
            let tf = f64::from(t);
            let mu = (beta_m[0] + beta_m[1] * tf + beta_m[2] * x).exp();
            let m = rng::poisson(&mut r, mu).unwrap();
            let eta = beta_y[0] + beta_y[1] * tf + beta_y[2] * x;
            let y = rng::binomial(&mut r, m, 1.0 / (1.0 + (-eta).exp())).unwrap();
            ExperimentRecord {
                unit_id: i as u64,
                treatment: t,
                covariates: vec![x],
                mediator: m,
                outcome: y,
            }
        })
        .collect();
    Dataset::new(vec![Covariate::numeric("x")], records).unwrap()
}

#[test]
fn gaussian_matches_closed_form_least_squares() {
    for k in 0..20 {
        let mut r = substream(Seed(11), 1, k);
        let (n, p) = (30 + k as usize * 5, 2 + k as usize % 4);
        let x = random_x(&mut r, n, p);
        let y: Vec<f64> = (0..n).map(|i| x.row(i).sum() + normal(&mut r)).collect();
        let fit = fit_irls(&manual(Family::Gaussian, x.clone(), y.clone(), None), IrlsOptions::default()).unwrap();
        let xtx = x.tr_mul(&x);
        let xty = x.tr_mul(&DVector::from_vec(y));
        let beta = xtx.cholesky().unwrap().solve(&xty);
        for (a, b) in fit.coefficients.iter().zip(beta.iter()) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "instance {k}: {a} vs {b}");
        }
    }
}

#[test]
fn poisson_intercept_only_is_log_mean() {
    for k in 0..10 {
        let mut r = substream(Seed(12), 1, k);
        let n = 50 + 10 * k as usize;
        let mean = 0.5 + k as f64;
        let y: Vec<f64> = (0..n).map(|_| rng::poisson(&mut r, mean).unwrap() as f64).collect();
        let ybar = y.iter().sum::<f64>() / n as f64;
        let fit = fit_irls(
            &manual(Family::Poisson, DMatrix::from_element(n, 1, 1.0), y, None),
            IrlsOptions::default(),
        )
        .unwrap();
        assert!((fit.coefficients[0] - ybar.ln()).abs() <= 1e-10);
    }
}

#[test]
fn score_matches_finite_differences() {
    let families = [Family::Gaussian, Family::Poisson, Family::Binomial];
    for k in 0..20u64 {
        let mut r = substream(Seed(13), 1, k);
        let family = families[k as usize % 3];
        let (n, p) = (25, 3);
        let x = random_x(&mut r, n, p);
        let truth = [0.3, -0.5, 0.4];
        let eta: Vec<f64> = (0..n).map(|i| (0..p).map(|j| x[(i, j)] * truth[j]).sum()).collect();
        let (y, trials) = match family {
            Family::Gaussian => (eta.iter().map(|e| e + normal(&mut r)).collect(), None),
            Family::Poisson => (
                eta.iter().map(|e| rng::poisson(&mut r, e.exp()).unwrap() as f64).collect(),
                None,
            ),
            Family::Binomial => {
                let t: Vec<f64> = (0..n).map(|_| 1.0 + r.random_range(0..6) as f64).collect();
                let y = eta
                    .iter()
                    .zip(&t)
                    .map(|(e, &m)| rng::binomial(&mut r, m as u64, 1.0 / (1.0 + (-e).exp())).unwrap() as f64)
                    .collect();
                (y, Some(t))
            }
        };
        let d = manual(family, x, y, trials);
        let beta: Vec<f64> = truth.iter().map(|b| b + 0.2 * normal(&mut r)).collect();
        let dispersion = 1.7;
        let analytic = score(&d, &beta, dispersion).unwrap();
        let numeric: Vec<f64> = (0..p)
            .map(|j| {
                let h = 1e-6 * beta[j].abs().max(1.0);
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[j] += h;
                dn[j] -= h;
                (log_likelihood(&d, &up, dispersion).unwrap() - log_likelihood(&d, &dn, dispersion).unwrap())
                    / (2.0 * h)
            })
            .collect();
        let norm = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in analytic.iter().zip(&numeric) {
            assert!((a - b).abs() <= 1e-4 * norm.max(1e-8), "{family:?} {k}: {a} vs {b}");
        }
    }
}

#[test]
fn recovers_gaussian_coefficients() {
    let mut r = substream(Seed(14), 1, 0);
    let n = 5000;
    let truth = [1.0, -2.0, 0.5];
    let x = random_x(&mut r, n, 3);
    let y: Vec<f64> = (0..n)
        .map(|i| (0..3).map(|j| x[(i, j)] * truth[j]).sum::<f64>() + 2.0 * normal(&mut r))
        .collect();
    let fit = fit_irls(&manual(Family::Gaussian, x, y, None), IrlsOptions::default()).unwrap();
    for j in 0..3 {
        let se = fit.covariance[(j, j)].sqrt();
        assert!((fit.coefficients[j] - truth[j]).abs() < 5.0 * se);
    }
    assert!((fit.dispersion - 4.0).abs() < 0.3);
}

#[test]
fn recovers_poisson_and_binomial_coefficients() {
    let beta_m = [0.2, 0.6, -0.4];
    let beta_y = [-1.0, 0.5, 0.8];
    let ds = count_dataset(5000, beta_m, beta_y, 15);
    let m_spec = ModelSpec::mediator_model(Family::Poisson, &["x"], false);
    let y_spec = ModelSpec::outcome_model(Family::Binomial, &["x"], false, false, Some(Column::Mediator));
    for (spec, truth) in [(m_spec, beta_m), (y_spec, beta_y)] {
        let fit = fit_irls(&build_design(&ds, &spec).unwrap(), IrlsOptions::default()).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.columns, ["(intercept)", "treatment", "x"]);
        for j in 0..3 {
            let se = fit.covariance[(j, j)].sqrt();
            assert!(
                (fit.coefficients[j] - truth[j]).abs() < 5.0 * se,
                "{:?} {j}: {} vs {}",
                spec.family,
                fit.coefficients[j],
                truth[j]
            );
        }
    }
}

#[test]
fn poisson_mediator_model_reproduces_cell_means() {
    let ds = simulate(&default_scenario(), Seed(16)).unwrap();
    let (m_spec, _) = ModelSpec::default_pair(&["business"], true);
    let fit = fit_irls(&build_design(&ds, &m_spec).unwrap(), IrlsOptions::default()).unwrap();
    let cfg = default_scenario();
    for t in 0..2u8 {
        for x in 0..2u8 {
            let cell = Dataset::new(
                ds.schema().to_vec(),
                vec![ExperimentRecord {
                    unit_id: 0,
                    treatment: t,
                    covariates: vec![f64::from(x)],
                    mediator: 0,
                    outcome: 0,
                }],
            )
            .unwrap();
            let mean = predict_mean(&fit, &cell, &Overrides::new()).unwrap()[0];
            let n_cell = ds
                .records()
                .iter()
                .filter(|r| r.treatment == t && r.covariates[0] == f64::from(x))
                .count() as f64;
            let rate = cfg.cell(t, x).booking_rate;
            assert!((mean - rate).abs() < 5.0 * (rate / n_cell).sqrt(), "cell ({t},{x}): {mean}");
        }
    }
}

#[test]
fn refit_is_bit_identical() {
    let ds = count_dataset(3000, [0.1, 0.5, 0.3], [-0.5, 0.2, 0.4], 17);
    let spec = ModelSpec::outcome_model(Family::Binomial, &["x"], true, false, Some(Column::Mediator));
    let d = build_design(&ds, &spec).unwrap();
    let a = fit_irls(&d, IrlsOptions::default()).unwrap();
    let b = fit_irls(&d, IrlsOptions::default()).unwrap();
    assert_eq!(a.coefficients, b.coefficients);
    assert_eq!(a.covariance, b.covariance);
    assert_eq!(a.log_likelihood.to_bits(), b.log_likelihood.to_bits());
}

#[test]
fn parameter_draws_match_fitted_moments() {
    let ds = count_dataset(2000, [0.1, 0.5, 0.3], [-0.5, 0.2, 0.4], 18);
    let spec = ModelSpec::mediator_model(Family::Poisson, &["x"], false);
    let fit = fit_irls(&build_design(&ds, &spec).unwrap(), IrlsOptions::default()).unwrap();
    let k = 20_000;
    let p = fit.coefficients.len();
    let mut r = substream(Seed(19), 1, 0);
    let draws: Vec<Vec<f64>> = (0..k).map(|_| draw_params(&fit, &mut r).unwrap()).collect();
    let mean: Vec<f64> = (0..p).map(|j| draws.iter().map(|d| d[j]).sum::<f64>() / k as f64).collect();
    for j in 0..p {
        let v = fit.covariance[(j, j)];
        assert!((mean[j] - fit.coefficients[j]).abs() < 5.0 * (v / k as f64).sqrt());
        for l in 0..p {
            let c = draws
                .iter()
                .map(|d| (d[j] - mean[j]) * (d[l] - mean[l]))
                .sum::<f64>()
                / (k - 1) as f64;
            let scale = (fit.covariance[(j, j)] * fit.covariance[(l, l)]).sqrt();
            assert!((c - fit.covariance[(j, l)]).abs() < 0.1 * scale, "cov[{j},{l}]");
        }
    }
}

#[test]
fn duplicated_columns_are_named() {
    let records = (0..20)
        .map(|i| ExperimentRecord {
            unit_id: i,
            treatment: (i % 2) as u8,
            covariates: vec![(i % 3) as f64 + 0.5, 2.0 * ((i % 3) as f64 + 0.5)],
            mediator: i % 4,
            outcome: 0,
        })
        .collect();
    let ds = Dataset::new(vec![Covariate::numeric("a"), Covariate::numeric("b")], records).unwrap();
    let spec = ModelSpec::mediator_model(Family::Poisson, &["a", "b"], false);
    match fit_irls(&build_design(&ds, &spec).unwrap(), IrlsOptions::default()) {
        Err(Error::RankDeficient { columns }) => {
            assert!(columns.contains(&"a".to_string()) && columns.contains(&"b".to_string()), "{columns:?}")
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn separated_outcome_is_reported() {
    // Every treated booking is cancelled, no control booking is.
    let records = (0..40)
        .map(|i| ExperimentRecord {
            unit_id: i,
            treatment: (i % 2) as u8,
            covariates: vec![],
            mediator: 1 + i % 3,
            outcome: if i % 2 == 1 { 1 + i % 3 } else { 0 },
        })
        .collect();
    let ds = Dataset::new(vec![], records).unwrap();
    let spec = ModelSpec::outcome_model(Family::Binomial, &[], false, false, Some(Column::Mediator));
    let res = fit_irls(&build_design(&ds, &spec).unwrap(), IrlsOptions::default());
    assert!(matches!(res, Err(Error::Separation { .. })), "{res:?}");
}

#[test]
fn overrides_change_predictions() {
    let ds = count_dataset(500, [0.1, 0.5, 0.3], [-0.5, 0.2, 0.4], 20);
    let spec = ModelSpec::mediator_model(Family::Poisson, &["x"], false);
    let fit = fit_irls(&build_design(&ds, &spec).unwrap(), IrlsOptions::default()).unwrap();
    let treated = predict_mean(&fit, &ds, &Overrides::new().set(Column::Treatment, OverrideValue::Scalar(1.0))).unwrap();
    let control = predict_mean(&fit, &ds, &Overrides::new().set(Column::Treatment, OverrideValue::Scalar(0.0))).unwrap();
    let ratio = fit.coefficient("treatment").unwrap().exp();
    for (a, b) in treated.iter().zip(&control) {
        assert!((a / b - ratio).abs() < 1e-12);
    }
}
