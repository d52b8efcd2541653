//! Sensitivity of the mediation estimates to unobserved confounding.
//!
//! With linear stages the indirect effect is identified only up to the
//! correlation ρ between the mediator-model and outcome-model errors. Three
//! least-squares fits on a shared regressor set Z = [1, T, X...] identify
//! everything else:
//!
//! ```text
//! total:    Y ~ Z        treatment coefficient τ̂, residual sd σ₁
//! mediator: M ~ Z        treatment coefficient β₂, residual sd σ₂
//! outcome:  Y ~ Z + M    mediator coefficient γ̂
//! ρ̃ = corr(total residuals, mediator residuals)
//! ```
//!
//! and then
//!
//! ```text
//! ACME(ρ) = β₂ · σ₁/σ₂ · [ρ̃ − ρ·√((1 − ρ̃²)/(1 − ρ²))]
//! ADE(ρ)  = τ̂ − ACME(ρ)
//! ```
//!
//! At ρ = 0 this is the product of coefficients β₂·γ̂, and ACME crosses zero
//! at ρ = ρ̃. Bands come from a nonparametric bootstrap over units.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::glm::{build_design, fit_irls_weighted, DesignMatrix, Family, FittedGlm, IrlsOptions, ModelSpec};
use crate::rng::{self, streams, Seed};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityComponents {
    pub beta2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho_tilde: f64,
    pub tau_hat: f64,
    pub gamma_hat: f64,
}

/// Regressor set shared by the three linear fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub covariates: Vec<String>,
    /// Include treatment × covariate products. The treatment coefficients
    /// then describe units with all covariates at zero.
    pub interactions: bool,
}

impl ComponentSpec {
    pub fn new(covariates: &[&str]) -> Self {
        ComponentSpec {
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            interactions: true,
        }
    }
}

struct ComponentDesigns {
    total: DesignMatrix,
    mediator: DesignMatrix,
    outcome: DesignMatrix,
}

impl ComponentDesigns {
    fn new(dataset: &Dataset, spec: &ComponentSpec) -> Result<Self> {
        let names: Vec<&str> = spec.covariates.iter().map(String::as_str).collect();
        let total = ModelSpec::outcome_model(Family::Gaussian, &names, spec.interactions, false, None);
        let (mediator, outcome) = ModelSpec::linear_pair(&names, spec.interactions);
        Ok(ComponentDesigns {
            total: build_design(dataset, &total)?,
            mediator: build_design(dataset, &mediator)?,
            outcome: build_design(dataset, &outcome)?,
        })
    }

    fn fit(&self, weights: Option<&[f64]>) -> Result<SensitivityComponents> {
        let opts = IrlsOptions::default();
        let total = fit_irls_weighted(&self.total, weights, opts)?;
        let mediator = fit_irls_weighted(&self.mediator, weights, opts)?;
        let outcome = fit_irls_weighted(&self.outcome, weights, opts)?;
        components_from_fits(&total, &mediator, &outcome, weights)
    }
}

fn coef(fit: &FittedGlm, name: &str) -> f64 {
    fit.coefficient(name).expect("linear pair has treatment and mediator terms")
}

fn components_from_fits(
    total: &FittedGlm,
    mediator: &FittedGlm,
    outcome: &FittedGlm,
    weights: Option<&[f64]>,
) -> Result<SensitivityComponents> {
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let (e1, e2) = (&total.residuals, &mediator.residuals);
    let (mut s12, mut s11, mut s22) = (0.0, 0.0, 0.0);
    for i in 0..e1.len() {
        s12 += w(i) * e1[i] * e2[i];
        s11 += w(i) * e1[i] * e1[i];
        s22 += w(i) * e2[i] * e2[i];
    }
    if !(s11 > 0.0 && s22 > 0.0) {
        return Err(Error::Numerical("zero residual variance in a sensitivity regression".into()));
    }
    let sigma1 = total.residual_sd.expect("gaussian fit");
    let sigma2 = mediator.residual_sd.expect("gaussian fit");
    Ok(SensitivityComponents {
        beta2: coef(mediator, "treatment"),
        sigma1,
        sigma2,
        rho_tilde: s12 / (s11 * s22).sqrt(),
        tau_hat: coef(total, "treatment"),
        gamma_hat: coef(outcome, "mediator"),
    })
}

/// Fits the three linear regressions with treatment × covariate
/// interactions and extracts the identified components.
pub fn fit_components(dataset: &Dataset, covariate_names: &[&str]) -> Result<SensitivityComponents> {
    fit_components_with(dataset, &ComponentSpec::new(covariate_names))
}

pub fn fit_components_with(dataset: &Dataset, spec: &ComponentSpec) -> Result<SensitivityComponents> {
    if dataset.is_empty() {
        return Err(Error::Estimation("dataset is empty".into()));
    }
    ComponentDesigns::new(dataset, spec)?.fit(None)
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("rho = {rho} must lie strictly inside (-1, 1)")))
    }
}

/// Per-visitor indirect effect when the stage errors correlate at `rho`.
pub fn acme_of_rho(c: &SensitivityComponents, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let slack = ((1.0 - c.rho_tilde * c.rho_tilde) / (1.0 - rho * rho)).sqrt();
    Ok(c.beta2 * c.sigma1 / c.sigma2 * (c.rho_tilde - rho * slack))
}

/// τ̂ − ACME(ρ).
pub fn ade_of_rho(c: &SensitivityComponents, rho: f64) -> Result<f64> {
    Ok(c.tau_hat - acme_of_rho(c, rho)?)
}

/// Power-of-two spacing fine enough to hold every value to within 2^-50 of
/// the largest magnitude, yet coarse enough that sums and differences of two
/// snapped values are exact.
fn snap_quantum(values: impl Iterator<Item = f64>) -> f64 {
    let max = values.fold(0.0f64, |a, v| a.max(v.abs()));
    if max > 0.0 && max.is_finite() {
        2f64.powi(max.log2().ceil() as i32 - 50)
    } else {
        0.0
    }
}

fn snap(v: f64, q: f64) -> f64 {
    if q > 0.0 {
        (v / q).round() * q
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for RhoGrid {
    fn default() -> Self {
        RhoGrid {
            min: -0.9,
            max: 0.9,
            step: 0.1,
        }
    }
}

impl RhoGrid {
    /// Ascending grid points, rounded to 12 decimals so that e.g. the
    /// default grid hits 0 and 0.3 exactly.
    pub fn values(&self) -> Result<Vec<f64>> {
        check_rho(self.min)?;
        check_rho(self.max)?;
        if !(self.step > 0.0) || self.max < self.min {
            return Err(Error::Config(format!(
                "invalid rho grid [{}, {}] step {}",
                self.min, self.max, self.step
            )));
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        if n > 1_000_000 {
            return Err(Error::Config("rho grid has too many points".into()));
        }
        Ok((0..n)
            .map(|k| ((self.min + k as f64 * self.step) * 1e12).round() / 1e12)
            .collect())
    }

    pub fn contains(&self, rho: f64) -> bool {
        self.min <= rho && rho <= self.max
    }
}

/// The ρ at which ACME(ρ) = 0, i.e. ρ̃, if it lies within the grid's range.
pub fn zero_crossing(c: &SensitivityComponents, grid: &RhoGrid) -> Option<f64> {
    grid.contains(c.rho_tilde).then_some(c.rho_tilde)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub components: ComponentSpec,
    pub grid: RhoGrid,
    pub bootstrap_reps: usize,
    pub ci_level: f64,
    #[serde(skip)]
    pub workers: Option<usize>,
}

pub const MIN_BOOTSTRAP_FOR_BANDS: usize = 100;
/// Degenerate resamples tolerated, as a fraction of `bootstrap_reps`.
pub const MAX_DEGENERATE_FRACTION: f64 = 0.1;

impl SensitivityConfig {
    pub fn new(covariates: &[&str]) -> Self {
        SensitivityConfig {
            components: ComponentSpec::new(covariates),
            grid: RhoGrid::default(),
            bootstrap_reps: 500,
            ci_level: 0.95,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub rho: f64,
    pub acme: f64,
    pub acme_lo: f64,
    pub acme_hi: f64,
    pub ade: f64,
    pub ade_lo: f64,
    pub ade_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityGrid {
    pub rows: Vec<SensitivityRow>,
    pub components: SensitivityComponents,
    /// τ̂ on the grid the row values were snapped to; every row satisfies
    /// `acme + ade == tau_hat` exactly.
    pub tau_hat: f64,
    pub zero_crossing: Option<f64>,
    pub bootstrap_reps: usize,
    pub degenerate_resamples: usize,
    /// Standard deviation of the bootstrap ACME at each grid point.
    pub acme_bootstrap_se: Vec<f64>,
    pub seed: Seed,
    pub config: SensitivityConfig,
}

impl SensitivityGrid {
    pub fn rho_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.rho).collect()
    }

    /// max − min of the point ADE(ρ) over the grid.
    pub fn ade_range(&self) -> f64 {
        let (lo, hi) = self
            .rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.ade), hi.max(r.ade)));
        hi - lo
    }

    /// `rho,acme,acme_lo,acme_hi,ade,ade_lo,ade_hi`, six decimals, LF.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rho,acme,acme_lo,acme_hi,ade,ade_lo,ade_hi\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.rho, r.acme, r.acme_lo, r.acme_hi, r.ade, r.ade_lo, r.ade_hi
            ));
        }
        s
    }
}

/// One bootstrap replicate: resample units with replacement (as frequency
/// weights) and refit. Rank-deficient resamples are redrawn from the same
/// substream and counted.
fn bootstrap_replicate(designs: &ComponentDesigns, n: usize, seed: Seed, b: usize, max_redraws: usize) -> Result<(SensitivityComponents, usize)> {
    let mut r = rng::substream(seed, streams::BOOTSTRAP, b as u64);
    let mut weights = vec![0.0; n];
    let mut degenerate = 0;
    loop {
        weights.iter_mut().for_each(|w| *w = 0.0);
        for _ in 0..n {
            let i = (rng::uniform(&mut r) * n as f64) as usize;
            weights[i.min(n - 1)] += 1.0;
        }
        match designs.fit(Some(&weights)) {
            Ok(c) => return Ok((c, degenerate)),
            Err(e) if e.is_numerical() && degenerate < max_redraws => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
}

/// ACME(ρ) and ADE(ρ) over the grid with percentile bootstrap bands.
pub fn sensitivity_curve(dataset: &Dataset, config: &SensitivityConfig, seed: Seed) -> Result<SensitivityGrid> {
    let rhos = config.grid.values()?;
    if config.bootstrap_reps < MIN_BOOTSTRAP_FOR_BANDS {
        return Err(Error::Config(format!(
            "{} bootstrap resamples requested; bands need at least {MIN_BOOTSTRAP_FOR_BANDS}",
            config.bootstrap_reps
        )));
    }
    if !(config.ci_level > 0.0 && config.ci_level < 1.0) {
        return Err(Error::Config(format!("ci_level {} not in (0, 1)", config.ci_level)));
    }
    if dataset.is_empty() {
        return Err(Error::Estimation("dataset is empty".into()));
    }
    let designs = ComponentDesigns::new(dataset, &config.components)?;
    let point = designs.fit(None)?;
    let n = dataset.len();
    let max_degenerate = (MAX_DEGENERATE_FRACTION * config.bootstrap_reps as f64).floor() as usize;

    let reps = rng::with_workers(config.workers, || {
        (0..config.bootstrap_reps)
            .into_par_iter()
            .map(|b| bootstrap_replicate(&designs, n, seed, b, max_degenerate + 1))
            .collect::<Result<Vec<_>>>()
    })??;
    let degenerate: usize = reps.iter().map(|(_, d)| d).sum();
    if degenerate > max_degenerate {
        return Err(Error::Estimation(format!(
            "{degenerate} of {} bootstrap resamples were degenerate",
            config.bootstrap_reps
        )));
    }

    let alpha = (1.0 - config.ci_level) / 2.0;
    let raw_acme = rhos.iter().map(|&r| acme_of_rho(&point, r)).collect::<Result<Vec<_>>>()?;
    let q = snap_quantum(raw_acme.iter().copied().chain([point.tau_hat]));
    let tau_hat = snap(point.tau_hat, q);
    let mut rows = Vec::with_capacity(rhos.len());
    let mut ses = Vec::with_capacity(rhos.len());
    for (&rho, &raw) in rhos.iter().zip(&raw_acme) {
        let acme = snap(raw, q);
        let boot_acme: Vec<f64> = reps
            .iter()
            .map(|(c, _)| acme_of_rho(c, rho))
            .collect::<Result<_>>()?;
        let boot_ade: Vec<f64> = reps.iter().zip(&boot_acme).map(|((c, _), a)| c.tau_hat - a).collect();
        let sa = stats::sorted(&boot_acme);
        let sd = stats::sorted(&boot_ade);
        ses.push(stats::sd(&boot_acme));
        rows.push(SensitivityRow {
            rho,
            acme,
            acme_lo: stats::quantile_sorted(&sa, alpha),
            acme_hi: stats::quantile_sorted(&sa, 1.0 - alpha),
            ade: tau_hat - acme,
            ade_lo: stats::quantile_sorted(&sd, alpha),
            ade_hi: stats::quantile_sorted(&sd, 1.0 - alpha),
        });
    }

    Ok(SensitivityGrid {
        rows,
        components: point,
        tau_hat,
        zero_crossing: zero_crossing(&point, &config.grid),
        bootstrap_reps: config.bootstrap_reps,
        degenerate_resamples: degenerate,
        acme_bootstrap_se: ses,
        seed,
        config: config.clone(),
    })
}
