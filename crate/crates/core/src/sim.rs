//! Synthetic booking/cancellation experiments.
//!
//! Each visitor is assigned to treatment and to the binary covariate by
//! independent Bernoulli draws, books `Poisson(booking_rate)` times and
//! cancels each booking independently with probability `cancel_prob`, where
//! both rates depend on the (treatment, covariate) cell.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Covariate, Dataset, ExperimentRecord};
use crate::error::{Error, Result};
use crate::rng::{self, streams, Seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub booking_rate: f64,
    pub cancel_prob: f64,
}

/// One entry of the `cells` list in a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub treatment: u8,
    pub covariate: u8,
    pub booking_rate: f64,
    pub cancel_prob: f64,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_units: u64,
    pub p_treatment: f64,
    pub covariate_name: String,
    pub p_covariate: f64,
    pub cells: Vec<CellSpec>,
    /// Assign exactly `round(n_units * p_treatment)` units to treatment
    /// instead of independent Bernoulli draws.
    #[serde(default, skip_serializing_if = "is_false")]
    pub exact_split: bool,
}

impl ScenarioConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(s).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("p_treatment", self.p_treatment)?;
        prob("p_covariate", self.p_covariate)?;
        if self.covariate_name.is_empty() {
            return Err(Error::Config("covariate_name is empty".into()));
        }
        for t in 0..2 {
            for x in 0..2 {
                let n = self.cells.iter().filter(|c| c.treatment == t && c.covariate == x).count();
                if n != 1 {
                    return Err(Error::Config(format!(
                        "cell (treatment={t}, covariate={x}) must appear exactly once, found {n}"
                    )));
                }
            }
        }
        for c in &self.cells {
            if c.treatment > 1 || c.covariate > 1 {
                return Err(Error::Config(format!(
                    "cell ({}, {}) is not a binary cell",
                    c.treatment, c.covariate
                )));
            }
            if !(c.booking_rate >= 0.0) || !c.booking_rate.is_finite() {
                return Err(Error::Config(format!("booking_rate {} must be >= 0", c.booking_rate)));
            }
            prob("cancel_prob", c.cancel_prob)?;
        }
        Ok(())
    }

    pub fn cell(&self, treatment: u8, covariate: u8) -> CellParams {
        let c = self
            .cells
            .iter()
            .find(|c| c.treatment == treatment && c.covariate == covariate)
            .expect("validated config has all four cells");
        CellParams {
            booking_rate: c.booking_rate,
            cancel_prob: c.cancel_prob,
        }
    }

    fn cell_table(&self) -> [[CellParams; 2]; 2] {
        [[self.cell(0, 0), self.cell(0, 1)], [self.cell(1, 0), self.cell(1, 1)]]
    }
}

/// The business-traveller scenario: treatment adds two bookings for
/// business travellers only and never changes per-booking cancellation.
pub fn default_scenario() -> ScenarioConfig {
    let cell = |treatment, covariate, booking_rate, cancel_prob| CellSpec {
        treatment,
        covariate,
        booking_rate,
        cancel_prob,
    };
    ScenarioConfig {
        n_units: 100_000,
        p_treatment: 0.5,
        covariate_name: "business".into(),
        p_covariate: 0.4,
        cells: vec![
            cell(0, 0, 1.0, 0.07),
            cell(0, 1, 1.0, 0.14),
            cell(1, 0, 1.0, 0.07),
            cell(1, 1, 3.0, 0.14),
        ],
        exact_split: false,
    }
}

pub fn simulate(config: &ScenarioConfig, seed: Seed) -> Result<Dataset> {
    simulate_with_workers(config, seed, None)
}

/// [`simulate`] on an explicit number of worker threads. The output does
/// not depend on `workers`.
pub fn simulate_with_workers(config: &ScenarioConfig, seed: Seed, workers: Option<usize>) -> Result<Dataset> {
    config.validate()?;
    let n = usize::try_from(config.n_units)
        .map_err(|_| Error::Numerical(format!("n_units {} overflows usize", config.n_units)))?;
    let cells = config.cell_table();

    let assignment = if config.exact_split {
        Some(exact_assignment(n, config.p_treatment, seed))
    } else {
        None
    };

    let records = rng::with_workers(workers, || {
        (0..n)
            .into_par_iter()
            .map(|i| {
                // Draw order per unit: treatment, covariate, bookings, cancellations.
                let mut r = rng::substream(seed, streams::SIMULATE, i as u64);
                let bern_t = rng::bernoulli(&mut r, config.p_treatment);
                let treatment = match &assignment {
                    Some(a) => a[i],
                    None => bern_t as u8,
                };
                let covariate = rng::bernoulli(&mut r, config.p_covariate) as u8;
                let params = cells[treatment as usize][covariate as usize];
                let bookings = rng::poisson(&mut r, params.booking_rate)?;
                let cancellations = rng::binomial(&mut r, bookings, params.cancel_prob)?;
                Ok(ExperimentRecord {
                    unit_id: i as u64,
                    treatment,
                    covariates: vec![covariate as f64],
                    mediator: bookings,
                    outcome: cancellations,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;

    Ok(Dataset::from_parts_unchecked(
        vec![Covariate::binary(config.covariate_name.clone())],
        records,
    ))
}

fn exact_assignment(n: usize, p: f64, seed: Seed) -> Vec<u8> {
    let treated = ((n as f64) * p).round() as usize;
    let mut a: Vec<u8> = (0..n).map(|i| (i < treated) as u8).collect();
    a.shuffle(&mut rng::substream(seed, streams::ASSIGNMENT, 0));
    a
}

/// Linear structural model with correlated stage errors and no covariates:
///
/// ```text
/// M = β₂·T + ε₂
/// Y = θ·T + γ·M + ε₃,    corr(ε₂, ε₃) = ρ
/// ```
///
/// The true ACME is β₂·γ and the true ADE is θ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSem {
    pub beta2: f64,
    pub gamma: f64,
    pub theta: f64,
    pub rho: f64,
    pub sigma_m: f64,
    pub sigma_y: f64,
    pub p_treatment: f64,
}

impl LinearSem {
    pub fn acme(&self) -> f64 {
        self.beta2 * self.gamma
    }
}

/// Draws `n` units from `sem`.
///
/// Records hold counts with `outcome <= mediator`, so M and Y are stored on a
/// common fixed-point scale: `outcome = round(scale·(Y − min Y))` and
/// `mediator = round(scale·(M − min M)) + shift` with `shift` large enough
/// to keep every outcome below its mediator. Shifts do not affect any
/// slope, and the shared scale leaves γ unchanged, so effects estimated on
/// the stored data equal `scale` times the effects on the original scale.
pub fn simulate_linear_sem(sem: &LinearSem, n: usize, scale: f64, seed: Seed) -> Result<Dataset> {
    if !(sem.rho.abs() < 1.0 && sem.sigma_m > 0.0 && sem.sigma_y > 0.0 && scale > 0.0) {
        return Err(Error::Config("linear model needs |rho| < 1 and positive scales".into()));
    }
    if !(0.0..=1.0).contains(&sem.p_treatment) {
        return Err(Error::Config(format!("p_treatment {} not in [0, 1]", sem.p_treatment)));
    }
    let raw: Vec<(u8, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(seed, streams::LINEAR_SEM, i as u64);
            let t = rng::bernoulli(&mut r, sem.p_treatment) as u8;
            let z1: f64 = StandardNormal.sample(&mut r);
            let z2: f64 = StandardNormal.sample(&mut r);
            let e2 = sem.sigma_m * z1;
            let e3 = sem.sigma_y * (sem.rho * z1 + (1.0 - sem.rho * sem.rho).sqrt() * z2);
            let m = sem.beta2 * f64::from(t) + e2;
            let y = sem.theta * f64::from(t) + sem.gamma * m + e3;
            (t, m, y)
        })
        .collect();
    let min = |f: fn(&(u8, f64, f64)) -> f64| raw.iter().map(f).fold(f64::INFINITY, f64::min);
    let (m_min, y_min) = (min(|u| u.1), min(|u| u.2));
    let y_max = raw.iter().map(|u| u.2).fold(f64::NEG_INFINITY, f64::max);
    let shift = (scale * (y_max - y_min)).ceil() + 1.0;
    if !(shift + scale * raw.iter().map(|u| u.1 - m_min).fold(0.0, f64::max) < 2f64.powi(53)) {
        return Err(Error::Numerical("fixed-point encoding exceeds f64 integer range".into()));
    }
    let records = raw
        .into_iter()
        .enumerate()
        .map(|(i, (t, m, y))| ExperimentRecord {
            unit_id: i as u64,
            treatment: t,
            covariates: Vec::new(),
            mediator: ((scale * (m - m_min)).round() + shift) as u64,
            outcome: (scale * (y - y_min)).round() as u64,
        })
        .collect();
    Dataset::new(Vec::new(), records)
}
