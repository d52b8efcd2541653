//! Two-stage causal mediation analysis for randomized experiments.
//!
//! The crate is organized bottom-up:
//!
//! * [`data`]: experiment records, CSV ingestion and cell summaries.
//! * [`sim`]: the booking/cancellation data-generating process.
//! * [`glm`]: IRLS fitting for gaussian, poisson and binomial GLMs, Wald
//!   inference, parameter draws and prediction.
//! * [`mediate`]: the quasi-Bayesian ACME/ADE estimator and the naive
//!   baselines it is compared against.
//! * [`sense`]: sensitivity of the linear mediation estimates to the
//!   correlation between stage-1 and stage-2 errors.
//!
//! All randomness flows through [`rng::substream`], so every result is a
//! pure function of its inputs and a [`Seed`], independent of how many
//! worker threads are used.

// `!(x >= 0.0)` guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod glm;
pub mod mediate;
pub mod rng;
pub mod sense;
pub mod sim;
pub mod stats;

pub use data::{CellSummary, Covariate, CovariateKind, Dataset, ExperimentRecord};
pub use error::{Error, Result};
pub use glm::{Column, Family, FittedGlm, ModelSpec, Term};
pub use mediate::{EffectEstimate, MediationConfig, MediationResult};
pub use rng::Seed;
pub use sense::{SensitivityComponents, SensitivityGrid};
pub use sim::{CellParams, ScenarioConfig};
