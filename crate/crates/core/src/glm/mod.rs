//! Generalized linear models fitted by iteratively reweighted least squares.
//!
//! Three families are supported, each with its canonical link:
//! gaussian-identity, poisson-log and binomial-logit. A binomial model may
//! take its number of trials from another column, which is how the default
//! outcome model treats bookings as opportunities to cancel.

mod design;
mod family;
mod irls;
mod sample;

pub use design::{
    build_design, Column, CompiledModel, DesignMatrix, ModelSpec, OverrideValue, Overrides, Response, RowValues,
    Term,
};
pub use family::Family;
pub use irls::{fit_irls, fit_irls_weighted, log_likelihood, score, FittedGlm, IrlsOptions};
pub use sample::{draw_params, predict_mean, sample_response, wald_test, ParamSampler, WaldTest};
