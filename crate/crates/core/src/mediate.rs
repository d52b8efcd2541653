//! Two-stage mediation analysis with quasi-Bayesian uncertainty.
//!
//! The mediator model M ~ T, X and the outcome model Y ~ T, (M), X are
//! fitted once. For each of J parameter draws β_m ~ N(β̂_m, V̂_m) and
//! β_y ~ N(β̂_y, V̂_y), every unit gets simulated potential mediators
//! M_i(0), M_i(1) and predicted potential outcomes Y_i(t, M_i(t')). Averaging
//! over units gives the draw-level effects
//!
//! ```text
//! acme_j(t) = mean_i[Y_i(t, M_i(1)) - Y_i(t, M_i(0))]
//! ade_j(t)  = mean_i[Y_i(1, M_i(t)) - Y_i(0, M_i(t))]
//! ate_j     = acme_j(t) + ade_j(1 - t)
//! ```
//!
//! and point estimates, percentile intervals and p-values summarize the J
//! draws. Identification rests on sequential ignorability: treatment is
//! randomized, and the mediator is as good as random given treatment and
//! the pre-treatment covariates. The second assumption cannot be checked
//! from data; see [`crate::sense`] for how conclusions move when it fails.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::glm::{
    build_design, fit_irls, sample_response, Column, CompiledModel, Family, FittedGlm, IrlsOptions, ModelSpec,
    ParamSampler, RowValues, Term,
};
use crate::rng::{self, streams, Seed};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub n_days: f64,
    /// Defaults to the number of analysed units (the subgroup size for
    /// conditional estimates).
    pub population: Option<f64>,
}

impl Default for Scaling {
    fn default() -> Self {
        Scaling {
            n_days: 30.0,
            population: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediationConfig {
    pub mediator_spec: ModelSpec,
    pub outcome_spec: ModelSpec,
    pub n_param_draws: usize,
    pub mediator_sims: usize,
    pub ci_level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditional_at: Option<BTreeMap<String, f64>>,
    pub scaling: Scaling,
    /// Worker threads; `None` uses the global pool. Never changes results.
    #[serde(skip)]
    pub workers: Option<usize>,
}

pub const MIN_DRAWS_FOR_CI: usize = 100;

impl MediationConfig {
    /// Poisson bookings and binomial cancellations stages with treatment ×
    /// covariate interactions.
    pub fn new(covariates: &[&str]) -> Self {
        let (mediator_spec, outcome_spec) = ModelSpec::default_pair(covariates, true);
        Self::with_specs(mediator_spec, outcome_spec)
    }

    pub fn with_specs(mediator_spec: ModelSpec, outcome_spec: ModelSpec) -> Self {
        MediationConfig {
            mediator_spec,
            outcome_spec,
            n_param_draws: 1000,
            mediator_sims: 1,
            ci_level: 0.95,
            conditional_at: None,
            scaling: Scaling::default(),
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mediator_spec.validate()?;
        self.outcome_spec.validate()?;
        if self.mediator_spec.response != crate::glm::Response::Mediator {
            return Err(Error::Config("mediator_spec must model the mediator".into()));
        }
        if self.outcome_spec.response != crate::glm::Response::Outcome {
            return Err(Error::Config("outcome_spec must model the outcome".into()));
        }
        if self.n_param_draws < MIN_DRAWS_FOR_CI {
            return Err(Error::Config(format!(
                "{} parameter draws requested; confidence intervals need at least {MIN_DRAWS_FOR_CI}",
                self.n_param_draws
            )));
        }
        if self.mediator_sims == 0 {
            return Err(Error::Config("mediator_sims must be positive".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config(format!("ci_level {} not in (0, 1)", self.ci_level)));
        }
        if !(self.scaling.n_days > 0.0) {
            return Err(Error::Config("n_days must be positive".into()));
        }
        if let Some(pop) = self.scaling.population {
            if !(pop > 0.0) {
                return Err(Error::Config("population must be positive".into()));
            }
        }
        if self.outcome_spec.trials == Some(Column::Mediator) && self.mediator_spec.family == Family::Gaussian {
            return Err(Error::Config(
                "a gaussian mediator cannot serve as binomial trials of the outcome".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    /// Median of the draws for simulation-based estimates.
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub per_day: f64,
    pub mean: f64,
    #[serde(skip)]
    pub std_error: Option<f64>,
    #[serde(skip)]
    pub draws: Vec<f64>,
}

impl EffectEstimate {
    /// Percentile summary of simulation draws.
    pub fn from_draws(draws: Vec<f64>, ci_level: f64, population: f64, n_days: f64) -> Self {
        let sorted = stats::sorted(&draws);
        let alpha = (1.0 - ci_level) / 2.0;
        let point = stats::quantile_sorted(&sorted, 0.5);
        EffectEstimate {
            point,
            ci_low: stats::quantile_sorted(&sorted, alpha),
            ci_high: stats::quantile_sorted(&sorted, 1.0 - alpha),
            p_value: quasi_p(&draws),
            per_day: scale_per_day(point, population, n_days),
            mean: stats::mean(&draws),
            std_error: (draws.len() > 1).then(|| stats::sd(&draws)),
            draws,
        }
    }

    /// Normal-approximation summary of an estimate with a standard error.
    pub fn from_normal(point: f64, std_error: f64, ci_level: f64, population: f64, n_days: f64) -> Self {
        let q = stats::normal_quantile(0.5 + ci_level / 2.0);
        EffectEstimate {
            point,
            ci_low: point - q * std_error,
            ci_high: point + q * std_error,
            p_value: stats::two_sided_p(point / std_error),
            per_day: scale_per_day(point, population, n_days),
            mean: point,
            std_error: Some(std_error),
            draws: Vec::new(),
        }
    }

    pub fn contains_zero(&self) -> bool {
        self.ci_low <= 0.0 && 0.0 <= self.ci_high
    }
}

/// Two-sided Monte Carlo p-value: twice the smaller of the fractions of
/// draws at or below zero and at or above zero, capped at 1. NaN for no
/// draws.
pub fn quasi_p(draws: &[f64]) -> f64 {
    if draws.is_empty() {
        return f64::NAN;
    }
    let n = draws.len() as f64;
    let le = draws.iter().filter(|&&d| d <= 0.0).count() as f64 / n;
    let ge = draws.iter().filter(|&&d| d >= 0.0).count() as f64 / n;
    (2.0 * le.min(ge)).min(1.0)
}

/// Converts a per-visitor effect into a daily count over the experiment.
pub fn scale_per_day(effect_per_visitor: f64, population: f64, n_days: f64) -> f64 {
    debug_assert!(n_days > 0.0);
    effect_per_visitor * population / n_days
}

/// Simulated potential mediators and predicted potential outcomes for every
/// analysed unit under one parameter draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomeGrid {
    /// `mediators[t'][l][i]`: the l-th simulated M_i(t').
    pub mediators: [Vec<Vec<f64>>; 2],
    /// `outcomes[t][t'][i]`: Y_i(t, M_i(t')) averaged over the mediator sims.
    pub outcomes: [[Vec<f64>; 2]; 2],
}

/// Per-draw unit averages of Y(t, M(t')), snapped to a common power-of-two
/// grid so that every sum and difference below is exact in f64.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawOutcomes {
    pub y: [[f64; 2]; 2],
}

impl DrawOutcomes {
    fn from_grid(grid: &PotentialOutcomeGrid) -> Result<Self> {
        let mut y = [[0.0; 2]; 2];
        for t in 0..2 {
            for tp in 0..2 {
                y[t][tp] = stats::mean(&grid.outcomes[t][tp]);
            }
        }
        let flat = [y[0][0], y[0][1], y[1][0], y[1][1]];
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite potential outcome".into()));
        }
        let max = flat.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if max > 0.0 {
            // |k| <= 2^50 per value keeps 4-term sums below 2^53
            let q = 2f64.powi(max.log2().ceil() as i32 - 50);
            for row in &mut y {
                for v in row.iter_mut() {
                    *v = (*v / q).round() * q;
                }
            }
        }
        Ok(DrawOutcomes { y })
    }

    pub fn acme(&self, t: usize) -> f64 {
        self.y[t][1] - self.y[t][0]
    }

    pub fn ade(&self, t: usize) -> f64 {
        self.y[1][t] - self.y[0][t]
    }

    pub fn ate(&self) -> f64 {
        self.acme(0) + self.ade(1)
    }
}

#[derive(Debug, Clone)]
pub struct MediationResult {
    pub acme: [EffectEstimate; 2],
    pub ade: [EffectEstimate; 2],
    pub ate: EffectEstimate,
    pub acme_avg: EffectEstimate,
    pub ade_avg: EffectEstimate,
    pub draws: Vec<DrawOutcomes>,
    pub config: MediationConfig,
    pub seed: Seed,
    pub n_units: usize,
    pub population: f64,
    pub mediator_fit: FittedGlm,
    pub outcome_fit: FittedGlm,
}

impl MediationResult {
    /// `{"ate", "acme_0", "acme_1", "ade_0", "ade_1", "acme_avg", "ade_avg",
    /// "seed", "config"}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut config = serde_json::to_value(&self.config).expect("config serializes");
        let obj = config.as_object_mut().expect("config is an object");
        obj.insert("n_units".into(), self.n_units.into());
        obj.insert("population".into(), self.population.into());
        obj.insert(
            "population_convention".into(),
            if self.config.scaling.population.is_some() {
                "explicit"
            } else if self.config.conditional_at.is_some() {
                "subgroup size"
            } else {
                "dataset size"
            }
            .into(),
        );
        obj.insert("point_estimate".into(), "median of draws".into());
        serde_json::json!({
            "ate": self.ate,
            "acme_0": self.acme[0],
            "acme_1": self.acme[1],
            "ade_0": self.ade[0],
            "ade_1": self.ade[1],
            "acme_avg": self.acme_avg,
            "ade_avg": self.ade_avg,
            "seed": self.seed.0,
            "config": config,
        })
    }
}

/// Fitted stages plus the per-unit rows the simulation runs over.
struct Engine {
    mediator_model: CompiledModel,
    outcome_model: CompiledModel,
    mediator_sampler: ParamSampler,
    outcome_sampler: ParamSampler,
    mediator_dispersion: f64,
    mediator_trials_column: bool,
    /// (record index, pinned covariates)
    units: Vec<(usize, Vec<f64>)>,
    sims: usize,
}

impl Engine {
    fn grid(&self, dataset: &Dataset, seed: Seed, j: usize) -> Result<PotentialOutcomeGrid> {
        let mut r = rng::substream(seed, streams::MEDIATE, j as u64);
        let beta_m = self.mediator_sampler.draw(&mut r);
        let beta_y = self.outcome_sampler.draw(&mut r);
        let records = dataset.records();
        let n = self.units.len();

        let mut link_means = [Vec::with_capacity(n), Vec::with_capacity(n)];
        let mut trials: Option<[Vec<f64>; 2]> = self.mediator_trials_column.then(|| [Vec::new(), Vec::new()]);
        for (tp, lm) in link_means.iter_mut().enumerate() {
            for (idx, covs) in &self.units {
                let rec = &records[*idx];
                let row = RowValues {
                    treatment: tp as f64,
                    covariates: covs,
                    mediator: rec.mediator as f64,
                    outcome: rec.outcome as f64,
                };
                lm.push(self.mediator_model.link_mean(&beta_m, &row));
                if let Some(t) = trials.as_mut() {
                    t[tp].push(self.mediator_model.trials(&row));
                }
            }
        }

        let mut mediators: [Vec<Vec<f64>>; 2] = [Vec::with_capacity(self.sims), Vec::with_capacity(self.sims)];
        for _ in 0..self.sims {
            for tp in 0..2 {
                let draw = sample_response(
                    self.mediator_model.family(),
                    &link_means[tp],
                    trials.as_ref().map(|t| t[tp].as_slice()),
                    self.mediator_dispersion,
                    &mut r,
                )?;
                mediators[tp].push(draw);
            }
        }

        let inv_l = 1.0 / self.sims as f64;
        let mut outcomes: [[Vec<f64>; 2]; 2] = Default::default();
        for t in 0..2 {
            for tp in 0..2 {
                let out = &mut outcomes[t][tp];
                out.reserve(n);
                for (u, (idx, covs)) in self.units.iter().enumerate() {
                    let rec = &records[*idx];
                    let mut acc = 0.0;
                    for sim in &mediators[tp] {
                        let row = RowValues {
                            treatment: t as f64,
                            covariates: covs,
                            mediator: sim[u],
                            outcome: rec.outcome as f64,
                        };
                        acc += self.outcome_model.mean(&beta_y, &row);
                    }
                    out.push(if self.sims == 1 { acc } else { acc * inv_l });
                }
            }
        }
        Ok(PotentialOutcomeGrid { mediators, outcomes })
    }
}

fn fit_stage(dataset: &Dataset, spec: &ModelSpec, stage: &'static str) -> Result<FittedGlm> {
    build_design(dataset, spec)
        .and_then(|d| fit_irls(&d, IrlsOptions::default()))
        .map_err(|e| e.in_stage(stage))
}

fn spec_mentions(spec: &ModelSpec, name: &str) -> bool {
    let col = Column::covariate(name);
    spec.terms.iter().any(|t: &Term| t.involves(&col))
}

fn build_engine(dataset: &Dataset, config: &MediationConfig) -> Result<(Engine, FittedGlm, FittedGlm)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Estimation("dataset is empty".into()));
    }
    let mediator_fit = fit_stage(dataset, &config.mediator_spec, "mediator model")?;
    let outcome_fit = fit_stage(dataset, &config.outcome_spec, "outcome model")?;

    let pins: Vec<(usize, f64)> = match &config.conditional_at {
        None => Vec::new(),
        Some(assign) => assign
            .iter()
            .map(|(name, &v)| {
                let idx = dataset
                    .covariate_index(name)
                    .ok_or_else(|| Error::Config(format!("unknown covariate `{name}`")))?;
                if !spec_mentions(&config.mediator_spec, name) || !spec_mentions(&config.outcome_spec, name) {
                    return Err(Error::Config(format!(
                        "conditioning covariate `{name}` must appear in both stage models"
                    )));
                }
                Ok((idx, v))
            })
            .collect::<Result<_>>()?,
    };
    let units: Vec<(usize, Vec<f64>)> = dataset
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| pins.iter().all(|&(i, v)| r.covariates[i] == v))
        .map(|(i, r)| {
            let mut covs = r.covariates.clone();
            for &(k, v) in &pins {
                covs[k] = v;
            }
            (i, covs)
        })
        .collect();
    if units.is_empty() {
        return Err(Error::Estimation("no units match the conditioning assignment".into()));
    }

    let engine = Engine {
        mediator_model: CompiledModel::new(&config.mediator_spec, dataset.schema())?,
        outcome_model: CompiledModel::new(&config.outcome_spec, dataset.schema())?,
        mediator_sampler: ParamSampler::new(&mediator_fit).map_err(|e| e.in_stage("mediator model"))?,
        outcome_sampler: ParamSampler::new(&outcome_fit).map_err(|e| e.in_stage("outcome model"))?,
        mediator_dispersion: mediator_fit.dispersion,
        mediator_trials_column: config.mediator_spec.trials.is_some(),
        units,
        sims: config.mediator_sims,
    };
    Ok((engine, mediator_fit, outcome_fit))
}

/// The potential-outcome grid of parameter draw `j`, exactly as
/// [`estimate`] computes it.
pub fn potential_outcome_grid(
    dataset: &Dataset,
    config: &MediationConfig,
    seed: Seed,
    j: usize,
) -> Result<PotentialOutcomeGrid> {
    let (engine, _, _) = build_engine(dataset, config)?;
    engine.grid(dataset, seed, j)
}

/// Estimates ACME, ADE and ATE. When `config.conditional_at` is set the
/// simulation runs over the matching subgroup only (see
/// [`conditional_estimate`]).
pub fn estimate(dataset: &Dataset, config: &MediationConfig, seed: Seed) -> Result<MediationResult> {
    let (engine, mediator_fit, outcome_fit) = build_engine(dataset, config)?;
    let draws = rng::with_workers(config.workers, || {
        (0..config.n_param_draws)
            .into_par_iter()
            .map(|j| DrawOutcomes::from_grid(&engine.grid(dataset, seed, j)?))
            .collect::<Result<Vec<_>>>()
    })??;

    let n_units = engine.units.len();
    let population = config.scaling.population.unwrap_or(n_units as f64);
    let summarize = |f: &dyn Fn(&DrawOutcomes) -> f64| {
        EffectEstimate::from_draws(
            draws.iter().map(f).collect(),
            config.ci_level,
            population,
            config.scaling.n_days,
        )
    };
    Ok(MediationResult {
        acme: [summarize(&|d| d.acme(0)), summarize(&|d| d.acme(1))],
        ade: [summarize(&|d| d.ade(0)), summarize(&|d| d.ade(1))],
        ate: summarize(&|d| d.ate()),
        acme_avg: summarize(&|d| (d.acme(0) + d.acme(1)) / 2.0),
        ade_avg: summarize(&|d| (d.ade(0) + d.ade(1)) / 2.0),
        draws,
        config: config.clone(),
        seed,
        n_units,
        population,
        mediator_fit,
        outcome_fit,
    })
}

/// Effects within the subgroup given by `config.conditional_at`, with the
/// conditioning covariates pinned at their assigned values in every
/// prediction. Per-day scaling defaults to the subgroup size.
pub fn conditional_estimate(dataset: &Dataset, config: &MediationConfig, seed: Seed) -> Result<MediationResult> {
    if config.conditional_at.as_ref().is_none_or(|a| a.is_empty()) {
        return Err(Error::Config("conditional_estimate needs a conditional_at assignment".into()));
    }
    estimate(dataset, config, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineOptions {
    pub ci_level: f64,
    pub n_days: f64,
    pub population: Option<f64>,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            ci_level: 0.95,
            n_days: 30.0,
            population: None,
        }
    }
}

/// Treated-minus-control difference in mean outcome with a Welch standard
/// error.
pub fn ate_diff_means(dataset: &Dataset, options: &BaselineOptions) -> Result<EffectEstimate> {
    let arm = |t: u8| -> Vec<f64> {
        dataset
            .records()
            .iter()
            .filter(|r| r.treatment == t)
            .map(|r| r.outcome as f64)
            .collect()
    };
    let (treated, control) = (arm(1), arm(0));
    if treated.len() < 2 || control.len() < 2 {
        return Err(Error::Estimation(
            "difference in means needs at least two units in each arm".into(),
        ));
    }
    let diff = stats::mean(&treated) - stats::mean(&control);
    let var = |xs: &[f64]| {
        let s = stats::sd(xs);
        s * s / xs.len() as f64
    };
    let se = (var(&treated) + var(&control)).sqrt();
    let population = options.population.unwrap_or(dataset.len() as f64);
    if se == 0.0 {
        let mut e = EffectEstimate::from_normal(diff, 1.0, options.ci_level, population, options.n_days);
        e.ci_low = diff;
        e.ci_high = diff;
        e.std_error = Some(0.0);
        e.p_value = if diff == 0.0 { 1.0 } else { 0.0 };
        return Ok(e);
    }
    Ok(EffectEstimate::from_normal(diff, se, options.ci_level, population, options.n_days))
}

/// Gaussian regression of the outcome on `[1, T, M]`, plus every dataset
/// covariate when `include_covariates` is set.
pub fn adjusted_regression_fit(dataset: &Dataset, include_covariates: bool) -> Result<FittedGlm> {
    let names: Vec<&str> = if include_covariates {
        dataset.schema().iter().map(|c| c.name.as_str()).collect()
    } else {
        Vec::new()
    };
    let spec = ModelSpec::outcome_model(Family::Gaussian, &names, false, true, None);
    fit_stage(dataset, &spec, "adjusted regression")
}

/// Treatment coefficient of [`adjusted_regression_fit`]. Conditioning on the
/// post-treatment mediator makes this a biased direct-effect estimate
/// whenever a confounder of mediator and outcome is present.
pub fn adjusted_direct(dataset: &Dataset, include_covariates: bool, options: &BaselineOptions) -> Result<EffectEstimate> {
    if !dataset.records().iter().any(|r| r.treatment == 1) || !dataset.records().iter().any(|r| r.treatment == 0) {
        return Err(Error::Estimation("adjusted regression needs both arms".into()));
    }
    let fit = adjusted_regression_fit(dataset, include_covariates)?;
    let w = crate::glm::wald_test(&fit, "treatment")?;
    let population = options.population.unwrap_or(dataset.len() as f64);
    Ok(EffectEstimate::from_normal(
        w.estimate,
        w.std_error,
        options.ci_level,
        population,
        options.n_days,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quasi_p_cases() {
        assert_eq!(quasi_p(&[0.1, 0.2, 3.0]), 0.0);
        assert_eq!(quasi_p(&[-1.0, -2.0, 1.0, 2.0]), 1.0);
        let mut d = vec![-1.0; 32];
        d.extend(vec![1.0; 68]);
        assert!((quasi_p(&d) - 0.64).abs() < 1e-12);
        assert_eq!(quasi_p(&[0.0, 0.0]), 1.0);
        assert!(quasi_p(&[]).is_nan());
    }

    #[test]
    fn per_day_scaling() {
        assert!((scale_per_day(0.112, 100_000.0, 30.0) - 373.333_333_333).abs() < 1e-6);
        assert_eq!(scale_per_day(0.0, 100_000.0, 30.0), 0.0);
        assert_eq!(scale_per_day(0.37, 1.0, 1.0), 0.37);
    }

    #[test]
    fn draw_outcomes_decompose_exactly() {
        let grid = PotentialOutcomeGrid {
            mediators: Default::default(),
            outcomes: [
                [vec![0.1, 0.30000000000000004], vec![0.7, 1.1]],
                [vec![0.2, 0.123456789], vec![1.9, 0.333]],
            ],
        };
        let d = DrawOutcomes::from_grid(&grid).unwrap();
        for t in 0..2 {
            assert_eq!(d.ate().to_bits(), (d.acme(t) + d.ade(1 - t)).to_bits());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = MediationConfig::new(&["business"]);
        assert!(c.validate().is_ok());
        c.n_param_draws = 50;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = MediationConfig::new(&["business"]);
        c.ci_level = 1.0;
        assert!(c.validate().is_err());
        let mut c = MediationConfig::new(&["business"]);
        c.mediator_spec.family = Family::Gaussian;
        assert!(c.validate().is_err());
        let (m, o) = ModelSpec::default_pair(&[], false);
        assert!(MediationConfig::with_specs(o, m).validate().is_err());
    }

    #[test]
    fn effect_from_draws_orders_interval() {
        let e = EffectEstimate::from_draws((0..101).map(|i| i as f64).collect(), 0.95, 10.0, 2.0);
        assert_eq!(e.point, 50.0);
        assert!(e.ci_low <= e.point && e.point <= e.ci_high);
        assert_eq!(e.per_day, 250.0);
        assert!((e.ci_low - 2.5).abs() < 1e-12 && (e.ci_high - 97.5).abs() < 1e-12);
    }
}
