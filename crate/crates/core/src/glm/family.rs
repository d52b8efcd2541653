use serde::{Deserialize, Serialize};

/// Response distribution and (canonical) link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "gaussian-identity")]
    Gaussian,
    #[serde(rename = "poisson-log")]
    Poisson,
    #[serde(rename = "binomial-logit")]
    Binomial,
}

/// Largest linear predictor passed to `exp` in the poisson family.
const MAX_ETA: f64 = 700.0;
const MIN_PROB: f64 = 1e-15;

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian-identity",
            Family::Poisson => "poisson-log",
            Family::Binomial => "binomial-logit",
        }
    }

    #[inline]
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Poisson => eta.min(MAX_ETA).exp(),
            Family::Binomial => logistic(eta),
        }
    }

    #[inline]
    pub(crate) fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Poisson => mu.ln(),
            Family::Binomial => (mu / (1.0 - mu)).ln(),
        }
    }

    /// dμ/dη.
    #[inline]
    pub(crate) fn mu_eta(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => eta.min(MAX_ETA).exp().max(f64::MIN_POSITIVE),
            Family::Binomial => {
                let p = logistic(eta);
                (p * (1.0 - p)).max(f64::MIN_POSITIVE)
            }
        }
    }

    #[inline]
    pub(crate) fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => mu.max(f64::MIN_POSITIVE),
            Family::Binomial => {
                let p = mu.clamp(MIN_PROB, 1.0 - MIN_PROB);
                p * (1.0 - p)
            }
        }
    }

    /// Unit deviance contribution; `y` and `mu` on the mean scale (a
    /// proportion for binomial), before prior weights.
    pub(crate) fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Gaussian => (y - mu) * (y - mu),
            Family::Poisson => {
                let mu = mu.max(f64::MIN_POSITIVE);
                2.0 * (xlogy(y, y / mu) - (y - mu))
            }
            Family::Binomial => {
                let mu = mu.clamp(MIN_PROB, 1.0 - MIN_PROB);
                2.0 * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu)))
            }
        }
    }
}

#[inline]
pub(crate) fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// x·ln(y) with 0·ln(·) = 0.
#[inline]
pub(crate) fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn links_invert() {
        for fam in [Family::Gaussian, Family::Poisson, Family::Binomial] {
            for eta in [-3.0, -0.5, 0.0, 0.7, 2.5] {
                let mu = fam.inverse_link(eta);
                assert!((fam.link(mu) - eta).abs() < 1e-12, "{fam:?} {eta}");
            }
        }
        assert_eq!(Family::Binomial.inverse_link(0.0), 0.5);
        assert!((Family::Poisson.inverse_link(3f64.ln()) - 3.0).abs() < 1e-14);
        assert!(logistic(-800.0) >= 0.0 && logistic(800.0) <= 1.0);
    }

    #[test]
    fn serde_names() {
        assert_eq!(serde_json::to_string(&Family::Poisson).unwrap(), "\"poisson-log\"");
        let f: Family = serde_json::from_str("\"binomial-logit\"").unwrap();
        assert_eq!(f, Family::Binomial);
    }
}
