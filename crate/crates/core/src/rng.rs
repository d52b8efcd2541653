//! Deterministic random substreams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] keyed by
//! `(master seed, stream, index)`:
//!
//! ```text
//! key   = mix64(master ^ mix64(stream + GOLDEN))
//! state = mix64(key + (index + 1) * GOLDEN)
//! rng   = ChaCha8Rng::seed_from_u64(state)
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer. Work items (simulated units,
//! parameter draws, bootstrap resamples) each own one substream, so results
//! do not depend on the order or the thread they run on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SubstreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream identifiers. Distinct streams never share a substream even for
/// equal indices.
pub mod streams {
    pub const SIMULATE: u64 = 1;
    pub const ASSIGNMENT: u64 = 2;
    pub const MEDIATE: u64 = 3;
    pub const BOOTSTRAP: u64 = 4;
    pub const LINEAR_SEM: u64 = 5;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: Seed, stream: u64, index: u64) -> SubstreamRng {
    let key = mix64(seed.0 ^ mix64(stream.wrapping_add(GOLDEN)));
    let state = mix64(key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)));
    ChaCha8Rng::seed_from_u64(state)
}

/// Uniform on [0, 1).
#[inline]
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

#[inline]
pub fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    uniform(rng) < p
}

/// Above this mean the inversion search gets long and `exp(-mean)` starts
/// losing precision, so sampling falls back to `rand_distr`'s PTRS sampler.
pub const POISSON_INVERSION_MAX_MEAN: f64 = 64.0;

/// Poisson draw. For means up to [`POISSON_INVERSION_MAX_MEAN`] this inverts
/// the CDF from a single uniform.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> Result<u64> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(Error::Numerical(format!("invalid poisson mean {mean}")));
    }
    if mean == 0.0 {
        // still consume the uniform so the stream layout is mean-independent
        let _ = uniform(rng);
        return Ok(0);
    }
    if mean > POISSON_INVERSION_MAX_MEAN {
        use rand_distr::Distribution;
        let d = rand_distr::Poisson::new(mean)
            .map_err(|e| Error::Numerical(format!("poisson({mean}): {e}")))?;
        let v: f64 = d.sample(rng);
        return Ok(v as u64);
    }
    let u = uniform(rng);
    let mut k = 0u64;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u >= cdf {
        k += 1;
        p *= mean / k as f64;
        let next = cdf + p;
        if next == cdf {
            // remaining tail mass is below f64 resolution
            break;
        }
        cdf = next;
    }
    Ok(k)
}

/// Binomial draw as a sum of `trials` Bernoulli draws.
pub fn binomial<R: Rng + ?Sized>(rng: &mut R, trials: u64, p: f64) -> Result<u64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Numerical(format!("invalid binomial probability {p}")));
    }
    let mut hits = 0u64;
    for _ in 0..trials {
        if bernoulli(rng, p) {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global rayon
/// pool when `workers` is `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::Config("worker count must be positive".into())),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let a: u64 = substream(Seed(7), streams::SIMULATE, 3).random();
        let b: u64 = substream(Seed(7), streams::SIMULATE, 3).random();
        let c: u64 = substream(Seed(7), streams::SIMULATE, 4).random();
        let d: u64 = substream(Seed(7), streams::MEDIATE, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn poisson_zero_mean_is_zero() {
        let mut rng = substream(Seed(1), 0, 0);
        for _ in 0..100 {
            assert_eq!(poisson(&mut rng, 0.0).unwrap(), 0);
        }
    }

    #[test]
    fn poisson_rejects_bad_mean() {
        let mut rng = substream(Seed(1), 0, 0);
        assert!(poisson(&mut rng, -1.0).is_err());
        assert!(poisson(&mut rng, f64::NAN).is_err());
    }

    #[test]
    fn poisson_mean_matches() {
        let mut rng = substream(Seed(11), 0, 0);
        let n = 100_000;
        let sum: u64 = (0..n).map(|_| poisson(&mut rng, 3.0).unwrap()).sum();
        let mean = sum as f64 / n as f64;
        assert!((mean - 3.0).abs() <= 5.0 * (3.0 / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn poisson_large_mean_falls_back() {
        let mut rng = substream(Seed(5), 0, 0);
        let n = 20_000;
        let sum: u64 = (0..n).map(|_| poisson(&mut rng, 200.0).unwrap()).sum();
        let mean = sum as f64 / n as f64;
        assert!((mean - 200.0).abs() <= 5.0 * (200.0 / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn binomial_edges() {
        let mut rng = substream(Seed(2), 0, 0);
        assert_eq!(binomial(&mut rng, 17, 1.0).unwrap(), 17);
        assert_eq!(binomial(&mut rng, 17, 0.0).unwrap(), 0);
        assert!(binomial(&mut rng, 3, 1.5).is_err());
    }
}
