use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::design::{CompiledModel, Overrides, RowValues};
use super::family::Family;
use super::irls::FittedGlm;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::stats;

/// Multivariate-normal sampler for `N(β̂, V̂)`.
///
/// V̂ is factored once as `Q·diag(λ)·Qᵀ` and draws are `β̂ + Q·√λ·z`. The
/// eigen factorization tolerates singular (e.g. all-zero) covariances. If an
/// eigenvalue is negative beyond rounding, a diagonal jitter of
/// `1e-12·trace/p` is added once before giving up.
#[derive(Debug, Clone)]
pub struct ParamSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl ParamSampler {
    pub fn new(fit: &FittedGlm) -> Result<Self> {
        Self::from_moments(&fit.coefficients, &fit.covariance)
    }

    pub fn from_moments(mean: &[f64], cov: &DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if cov.shape() != (p, p) {
            return Err(Error::Numerical("covariance shape does not match coefficients".into()));
        }
        let sym = (cov + cov.transpose()) * 0.5;
        let factor = match psd_factor(&sym) {
            Some(f) => f,
            None => {
                let jitter = 1e-12 * sym.trace().abs() / p as f64;
                let jittered = &sym + DMatrix::identity(p, p) * jitter;
                psd_factor(&jittered).ok_or_else(|| {
                    Error::Numerical("covariance is not positive semidefinite, even after jitter".into())
                })?
            }
        };
        Ok(ParamSampler {
            mean: DVector::from_column_slice(mean),
            factor,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(self.mean.len(), (0..self.mean.len()).map(|_| StandardNormal.sample(rng)));
        (&self.mean + &self.factor * z).iter().copied().collect()
    }
}

fn psd_factor(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(cov.clone());
    let scale = eig.eigenvalues.amax();
    let floor = -1e-12 * scale.max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| l < floor || !l.is_finite()) {
        return None;
    }
    let mut q = eig.eigenvectors;
    for (j, mut col) in q.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[j].max(0.0).sqrt();
    }
    Some(q)
}

/// One parameter draw from `N(β̂, V̂)`. Builds the factorization on every
/// call; use [`ParamSampler`] for repeated draws.
pub fn draw_params<R: Rng + ?Sized>(fit: &FittedGlm, rng: &mut R) -> Result<Vec<f64>> {
    Ok(ParamSampler::new(fit)?.draw(rng))
}

/// Independent draws from the family's distribution around `means`.
///
/// * gaussian: `means + √dispersion·z`
/// * poisson: `Poisson(mean)`
/// * binomial: `means` are probabilities; draws are `Binomial(trials, p)`
///   with one trial per element when `trials` is `None`.
pub fn sample_response<R: Rng + ?Sized>(
    family: Family,
    means: &[f64],
    trials: Option<&[f64]>,
    dispersion: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if let Some(t) = trials {
        if t.len() != means.len() {
            return Err(Error::Config("trials and means differ in length".into()));
        }
    }
    match family {
        Family::Gaussian => {
            if !(dispersion >= 0.0) || !dispersion.is_finite() {
                return Err(Error::Numerical(format!("invalid gaussian dispersion {dispersion}")));
            }
            let sd = dispersion.sqrt();
            means
                .iter()
                .map(|&m| {
                    if !m.is_finite() {
                        return Err(Error::Numerical(format!("invalid gaussian mean {m}")));
                    }
                    let z: f64 = StandardNormal.sample(rng);
                    Ok(m + sd * z)
                })
                .collect()
        }
        Family::Poisson => means.iter().map(|&m| Ok(rng::poisson(rng, m)? as f64)).collect(),
        Family::Binomial => means
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let n = trials.map_or(1.0, |t| t[i]);
                if !(n >= 0.0) || n.fract() != 0.0 {
                    return Err(Error::Numerical(format!("invalid trial count {n}")));
                }
                Ok(rng::binomial(rng, n as u64, p)? as f64)
            })
            .collect(),
    }
}

/// Predicted means for every dataset row after applying `overrides`.
/// Binomial models with a trials column return expected counts, with the
/// trials column itself subject to overrides.
pub fn predict_mean(fit: &FittedGlm, dataset: &Dataset, overrides: &Overrides) -> Result<Vec<f64>> {
    let model = CompiledModel::new(&fit.spec, dataset.schema())?;
    let covs = overrides.resolve(dataset)?;
    let mut buf = Vec::with_capacity(dataset.schema().len());
    Ok(dataset
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (treatment, mediator) = overrides.apply_scalars(i, r, &covs, &mut buf);
            let row = RowValues {
                treatment,
                covariates: &buf,
                mediator,
                outcome: r.outcome as f64,
            };
            model.mean(&fit.coefficients, &row)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldTest {
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

pub fn wald_test(fit: &FittedGlm, coefficient: &str) -> Result<WaldTest> {
    let j = fit
        .coefficient_index(coefficient)
        .ok_or_else(|| Error::Config(format!("no coefficient named `{coefficient}`")))?;
    let var = fit.covariance[(j, j)];
    if !(var > 0.0) {
        return Err(Error::Numerical(format!("zero variance for `{coefficient}`")));
    }
    let std_error = var.sqrt();
    let estimate = fit.coefficients[j];
    let z = estimate / std_error;
    Ok(WaldTest {
        estimate,
        std_error,
        z,
        p_value: stats::two_sided_p(z),
    })
}
