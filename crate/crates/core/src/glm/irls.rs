use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use super::design::{DesignMatrix, ModelSpec};
use super::family::{xlogy, Family};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    pub max_iter: usize,
    /// Relative deviance change at which iteration stops.
    pub tol: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

/// Singular-value ratio (of the column-scaled design) below which the
/// design is treated as rank deficient.
const RANK_TOL: f64 = 1e-10;
/// Logistic coefficients beyond this magnitude indicate separation.
const SEPARATION_BOUND: f64 = 30.0;
const SCORE_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FittedGlm {
    pub spec: ModelSpec,
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Inverse Fisher information times the dispersion.
    pub covariance: DMatrix<f64>,
    /// RSS/(n - p) for gaussian fits, 1 otherwise.
    pub dispersion: f64,
    pub log_likelihood: f64,
    pub deviance: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// Response residuals of the kept rows; counts for binomial models.
    pub residuals: Vec<f64>,
    /// Gaussian fits only.
    pub residual_sd: Option<f64>,
    /// Number of observations (sum of frequency weights).
    pub n_obs: f64,
}

impl FittedGlm {
    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn coefficient_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficient_index(name).map(|i| self.coefficients[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.coefficient_index(name).map(|i| self.covariance[(i, i)].sqrt())
    }
}

/// Per-row quantities on the scale the IRLS works on.
struct Problem<'a> {
    family: Family,
    x: &'a DMatrix<f64>,
    /// Response on the mean scale (proportions for binomial).
    y: Vec<f64>,
    /// Prior weights: frequency weight × trials.
    prior: Vec<f64>,
    freq_total: f64,
}

impl<'a> Problem<'a> {
    fn new(design: &'a DesignMatrix, weights: Option<&[f64]>) -> Result<Self> {
        let n = design.n_rows();
        if let Some(w) = weights {
            if w.len() != n {
                return Err(Error::Config(format!("{} weights for {n} rows", w.len())));
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Config("weights must be finite and non-negative".into()));
            }
        }
        let freq = |i: usize| weights.map_or(1.0, |w| w[i]);
        let mut y = Vec::with_capacity(n);
        let mut prior = Vec::with_capacity(n);
        for i in 0..n {
            let trials = design.trials.as_ref().map_or(1.0, |t| t[i]);
            let yi = design.y[i];
            match design.family() {
                Family::Binomial => {
                    if !(trials > 0.0) || !(0.0..=trials).contains(&yi) {
                        return Err(Error::Numerical(format!(
                            "binomial row {i}: response {yi} outside [0, {trials}]"
                        )));
                    }
                    y.push(yi / trials);
                }
                Family::Poisson if yi < 0.0 => {
                    return Err(Error::Numerical(format!("poisson row {i}: negative response {yi}")));
                }
                _ => y.push(yi),
            }
            prior.push(freq(i) * trials);
        }
        let freq_total = (0..n).map(freq).sum();
        Ok(Problem {
            family: design.family(),
            x: &design.x,
            y,
            prior,
            freq_total,
        })
    }

    fn eta(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.x * beta
    }

    fn deviance(&self, mu: &[f64]) -> f64 {
        self.y
            .iter()
            .zip(mu)
            .zip(&self.prior)
            .map(|((&y, &m), &w)| if w == 0.0 { 0.0 } else { w * self.family.unit_deviance(y, m) })
            .sum()
    }

    fn means(&self, eta: &DVector<f64>) -> Vec<f64> {
        eta.iter().map(|&e| self.family.inverse_link(e)).collect()
    }
}

/// Solves the weighted least-squares problem min Σ w (z - Xβ)² by QR of
/// √W·X. Returns the triangular factor R and, when R is invertible, β.
fn weighted_lstsq(x: &DMatrix<f64>, w: &[f64], z: &[f64]) -> (Option<DVector<f64>>, DMatrix<f64>) {
    let (n, p) = x.shape();
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let a = DMatrix::from_fn(n, p, |i, j| sw[i] * x[(i, j)]);
    let mut b = DVector::from_iterator(n, z.iter().zip(&sw).map(|(zi, s)| zi * s));
    let qr = a.qr();
    qr.q_tr_mul(&mut b);
    let r = qr.r();
    let beta = r.solve_upper_triangular(&b.rows(0, p).into_owned());
    (beta, r)
}

/// Rank check on the triangular factor of a weighted design. Columns are
/// scaled to unit norm (the column norms of R equal those of √W·X), and the
/// design is rejected when the smallest singular value falls below
/// `RANK_TOL` times the largest. Positive row weights do not change rank,
/// so any IRLS iteration's factor will do.
fn check_rank(r: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut r = r.clone();
    for (j, mut col) in r.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(Error::RankDeficient {
                columns: vec![names[j].clone()],
            });
        }
        col /= norm;
    }
    let svd = r.svd(false, true);
    let sv = &svd.singular_values;
    let (imin, smin) = sv
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    if !(smin > RANK_TOL * sv.max()) {
        let vt = svd.v_t.expect("requested V^T");
        let v = vt.row(imin);
        let vmax = v.amax();
        let columns = names
            .iter()
            .zip(v.iter())
            .filter(|(_, c)| c.abs() > 1e-3 * vmax)
            .map(|(n, _)| n.clone())
            .collect();
        return Err(Error::RankDeficient { columns });
    }
    Ok(())
}

pub fn fit_irls(design: &DesignMatrix, options: IrlsOptions) -> Result<FittedGlm> {
    let w = design.weights.as_ref().map(|w| w.as_slice().to_vec());
    fit_irls_weighted(design, w.as_deref(), options)
}

/// IRLS with frequency weights (one per kept row) in place of any stored in
/// the design.
pub fn fit_irls_weighted(design: &DesignMatrix, weights: Option<&[f64]>, options: IrlsOptions) -> Result<FittedGlm> {
    let prob = Problem::new(design, weights)?;
    let (n, p) = design.x.shape();
    let effective = prob.prior.iter().filter(|&&w| w > 0.0).count();
    if effective <= p {
        return Err(Error::Numerical(format!(
            "{effective} informative rows for {p} coefficients"
        )));
    }
    let freq: Vec<f64> = (0..n).map(|i| weights.map_or(1.0, |w| w[i])).collect();

    let fam = prob.family;
    let mut mu: Vec<f64> = prob
        .y
        .iter()
        .zip(&prob.prior)
        .map(|(&y, &w)| match fam {
            Family::Gaussian => y,
            Family::Poisson => y + 0.1,
            Family::Binomial => {
                let t = if w > 0.0 { w } else { 1.0 };
                (t * y + 0.5) / (t + 1.0)
            }
        })
        .collect();
    let mut eta = DVector::from_iterator(n, mu.iter().map(|&m| fam.link(m)));
    let mut dev_old = prob.deviance(&mu);
    let mut beta = DVector::zeros(p);
    let mut have_beta = false;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_r = None;

    while iterations < options.max_iter {
        iterations += 1;
        let mut w = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for i in 0..n {
            let d = fam.mu_eta(eta[i]);
            w.push(prob.prior[i] * d * d / fam.variance(mu[i]));
            z.push(eta[i] + (prob.y[i] - mu[i]) / d);
        }
        let (solved, r) = weighted_lstsq(&design.x, &w, &z);
        if iterations == 1 {
            check_rank(&r, &design.columns)?;
        }
        let mut beta_new =
            solved.ok_or_else(|| Error::Numerical("singular triangular factor in weighted least squares".into()))?;
        last_r = Some(r);
        let mut eta_new = prob.eta(&beta_new);
        let mut mu_new = prob.means(&eta_new);
        let mut dev = prob.deviance(&mu_new);

        // step halving on divergence
        let mut halvings = 0;
        while have_beta && (!dev.is_finite() || dev > dev_old * (1.0 + 1e-12) + 1e-12) && halvings < 30 {
            beta_new = (&beta_new + &beta) * 0.5;
            eta_new = prob.eta(&beta_new);
            mu_new = prob.means(&eta_new);
            dev = prob.deviance(&mu_new);
            halvings += 1;
        }
        if !dev.is_finite() {
            return Err(Error::Numerical("deviance became non-finite".into()));
        }

        if fam == Family::Binomial {
            if let Some(j) = beta_new.iter().position(|b| b.abs() > SEPARATION_BOUND) {
                return Err(Error::Separation {
                    column: design.columns[j].clone(),
                });
            }
        }

        let rel = (dev - dev_old).abs() / (dev.abs() + 0.1);
        let step = if have_beta {
            beta_new
                .iter()
                .zip(beta.iter())
                .fold(0.0f64, |a, (b1, b0)| a.max((b1 - b0).abs() / (1.0 + b1.abs())))
        } else {
            f64::INFINITY
        };
        beta = beta_new;
        eta = eta_new;
        mu = mu_new;
        dev_old = dev;
        have_beta = true;

        if fam == Family::Gaussian {
            // exact after one weighted least-squares solve
            converged = true;
            break;
        }
        // Newton converges quadratically, so a small last step leaves the
        // coefficients accurate to near machine precision.
        if rel <= options.tol && step <= options.tol {
            let dispersion = 1.0;
            let s = score_at(&prob, &beta, dispersion);
            let ll = log_likelihood_at(&prob, &design.y, design.trials.as_ref(), &freq, &beta, dispersion);
            let smax = s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if smax <= SCORE_TOL * (1.0 + ll.abs()) {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            last_coefficients: beta.iter().copied().collect(),
        });
    }

    let r = if fam == Family::Gaussian {
        // weights never change, so the solve's factor is final
        last_r.expect("at least one iteration")
    } else {
        let w: Vec<f64> = (0..n)
            .map(|i| {
                let d = fam.mu_eta(eta[i]);
                prob.prior[i] * d * d / fam.variance(mu[i])
            })
            .collect();
        weighted_lstsq(&design.x, &w, &vec![0.0; n]).1
    };

    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let t = design.trials.as_ref().map_or(1.0, |t| t[i]);
            match fam {
                Family::Binomial => design.y[i] - t * mu[i],
                _ => design.y[i] - mu[i],
            }
        })
        .collect();

    let dispersion = match fam {
        Family::Gaussian => {
            let rss: f64 = residuals.iter().zip(&freq).map(|(e, f)| f * e * e).sum();
            rss / (prob.freq_total - p as f64)
        }
        _ => 1.0,
    };
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Numerical("singular information matrix".into()))?;
    let mut covariance = &rinv * rinv.transpose() * dispersion;
    covariance = (&covariance + covariance.transpose()) * 0.5;

    let ll_dispersion = match fam {
        // maximum-likelihood variance
        Family::Gaussian => dispersion * (prob.freq_total - p as f64) / prob.freq_total,
        _ => 1.0,
    };
    let log_likelihood = log_likelihood_at(&prob, &design.y, design.trials.as_ref(), &freq, &beta, ll_dispersion);

    Ok(FittedGlm {
        spec: design.spec.clone(),
        columns: design.columns.clone(),
        coefficients: beta.iter().copied().collect(),
        covariance,
        dispersion,
        log_likelihood,
        deviance: dev_old,
        n_iterations: iterations,
        converged,
        residuals,
        residual_sd: (fam == Family::Gaussian).then(|| dispersion.sqrt()),
        n_obs: prob.freq_total,
    })
}

fn log_likelihood_at(
    prob: &Problem<'_>,
    y_raw: &DVector<f64>,
    trials: Option<&DVector<f64>>,
    freq: &[f64],
    beta: &DVector<f64>,
    dispersion: f64,
) -> f64 {
    let eta = prob.eta(beta);
    let mut ll = 0.0;
    for i in 0..eta.len() {
        let f = freq[i];
        if f == 0.0 {
            continue;
        }
        let y = y_raw[i];
        ll += f * match prob.family {
            Family::Gaussian => {
                let e = y - eta[i];
                -0.5 * (2.0 * std::f64::consts::PI * dispersion).ln() - e * e / (2.0 * dispersion)
            }
            Family::Poisson => {
                let mu = prob.family.inverse_link(eta[i]);
                xlogy(y, mu) - mu - ln_gamma(y + 1.0)
            }
            Family::Binomial => {
                let t = trials.map_or(1.0, |t| t[i]);
                // log p = -log(1+e^-η), log(1-p) = -log(1+e^η)
                let log_p = -softplus(-eta[i]);
                let log_q = -softplus(eta[i]);
                ln_gamma(t + 1.0) - ln_gamma(y + 1.0) - ln_gamma(t - y + 1.0) + y * log_p + (t - y) * log_q
            }
        };
    }
    ll
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn score_at(prob: &Problem<'_>, beta: &DVector<f64>, dispersion: f64) -> Vec<f64> {
    let eta = prob.eta(beta);
    // canonical links: score = Xᵀ·prior·(y - μ) / φ
    let r = DVector::from_iterator(
        eta.len(),
        (0..eta.len()).map(|i| prob.prior[i] * (prob.y[i] - prob.family.inverse_link(eta[i])) / dispersion),
    );
    prob.x.tr_mul(&r).iter().copied().collect()
}

/// Log-likelihood of `beta` for the design's family. `dispersion` is the
/// gaussian variance and ignored otherwise.
pub fn log_likelihood(design: &DesignMatrix, beta: &[f64], dispersion: f64) -> Result<f64> {
    let w = design.weights.as_ref().map(|w| w.as_slice().to_vec());
    let prob = Problem::new(design, w.as_deref())?;
    let freq: Vec<f64> = (0..design.n_rows()).map(|i| w.as_ref().map_or(1.0, |w| w[i])).collect();
    Ok(log_likelihood_at(
        &prob,
        &design.y,
        design.trials.as_ref(),
        &freq,
        &DVector::from_column_slice(beta),
        dispersion,
    ))
}

/// Analytic gradient of [`log_likelihood`] with respect to the coefficients.
pub fn score(design: &DesignMatrix, beta: &[f64], dispersion: f64) -> Result<Vec<f64>> {
    let w = design.weights.as_ref().map(|w| w.as_slice().to_vec());
    let prob = Problem::new(design, w.as_deref())?;
    let d = if design.family() == Family::Gaussian { dispersion } else { 1.0 };
    Ok(score_at(&prob, &DVector::from_column_slice(beta), d))
}
