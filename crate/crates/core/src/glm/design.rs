use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::family::{logistic, Family};
use crate::data::{Covariate, Dataset, ExperimentRecord};
use crate::error::{Error, Result};

/// A column role in the experiment data.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Column {
    Treatment,
    Covariate(String),
    Mediator,
    Outcome,
}

impl Column {
    pub fn covariate(name: impl Into<String>) -> Self {
        Column::Covariate(name.into())
    }

    pub fn name(&self) -> &str {
        match self {
            Column::Treatment => "treatment",
            Column::Covariate(n) => n,
            Column::Mediator => "mediator",
            Column::Outcome => "outcome",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Intercept,
    Main(Column),
    Product(Column, Column),
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::Intercept => "(intercept)".into(),
            Term::Main(c) => c.name().into(),
            Term::Product(a, b) => format!("{}:{}", a.name(), b.name()),
        }
    }

    fn columns(&self) -> impl Iterator<Item = &Column> {
        let (a, b) = match self {
            Term::Intercept => (None, None),
            Term::Main(c) => (Some(c), None),
            Term::Product(x, y) => (Some(x), Some(y)),
        };
        a.into_iter().chain(b)
    }

    pub fn involves(&self, col: &Column) -> bool {
        self.columns().any(|c| c == col)
    }

    fn same_as(&self, other: &Term) -> bool {
        match (self, other) {
            (Term::Product(a, b), Term::Product(c, d)) => (a == c && b == d) || (a == d && b == c),
            _ => self == other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    Mediator,
    Outcome,
}

impl Response {
    fn column(self) -> Column {
        match self {
            Response::Mediator => Column::Mediator,
            Response::Outcome => Column::Outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: Response,
    pub terms: Vec<Term>,
    pub family: Family,
    /// Binomial only: column holding the number of trials per row. Absent
    /// means one trial per row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<Column>,
}

impl ModelSpec {
    fn treatment_block(covariates: &[&str], interactions: bool) -> Vec<Term> {
        let mut terms = vec![Term::Intercept, Term::Main(Column::Treatment)];
        terms.extend(covariates.iter().map(|c| Term::Main(Column::covariate(*c))));
        if interactions {
            terms.extend(
                covariates
                    .iter()
                    .map(|c| Term::Product(Column::Treatment, Column::covariate(*c))),
            );
        }
        terms
    }

    /// Mediator model `[1, T, X..., T·X...]`.
    pub fn mediator_model(family: Family, covariates: &[&str], interactions: bool) -> Self {
        ModelSpec {
            response: Response::Mediator,
            terms: Self::treatment_block(covariates, interactions),
            family,
            trials: None,
        }
    }

    /// Outcome model `[1, T, (M), X..., T·X...]`.
    pub fn outcome_model(
        family: Family,
        covariates: &[&str],
        interactions: bool,
        mediator_term: bool,
        trials: Option<Column>,
    ) -> Self {
        let mut terms = Self::treatment_block(covariates, interactions);
        if mediator_term {
            terms.insert(2, Term::Main(Column::Mediator));
        }
        ModelSpec {
            response: Response::Outcome,
            terms,
            family,
            trials,
        }
    }

    /// Poisson-log bookings model and binomial-logit cancellations model
    /// with bookings as the number of trials.
    pub fn default_pair(covariates: &[&str], interactions: bool) -> (Self, Self) {
        (
            Self::mediator_model(Family::Poisson, covariates, interactions),
            Self::outcome_model(Family::Binomial, covariates, interactions, false, Some(Column::Mediator)),
        )
    }

    /// Fully linear pair; the outcome model includes the mediator as a term.
    pub fn linear_pair(covariates: &[&str], interactions: bool) -> (Self, Self) {
        (
            Self::mediator_model(Family::Gaussian, covariates, interactions),
            Self::outcome_model(Family::Gaussian, covariates, interactions, true, None),
        )
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(Term::name).collect()
    }

    /// True when the mediator can influence this model's predictions.
    pub fn depends_on_mediator(&self) -> bool {
        self.trials.as_ref() == Some(&Column::Mediator) || self.terms.iter().any(|t| t.involves(&Column::Mediator))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.terms.first() != Some(&Term::Intercept) {
            return bad("the intercept must be the first term".into());
        }
        for (i, t) in self.terms.iter().enumerate() {
            if self.terms[..i].iter().any(|u| u.same_as(t)) {
                return bad(format!("duplicate term `{}`", t.name()));
            }
            if t.involves(&self.response.column()) || t.involves(&Column::Outcome) {
                return bad(format!("term `{}` uses the response or the outcome", t.name()));
            }
            if self.response == Response::Mediator && t.involves(&Column::Mediator) {
                return bad(format!("term `{}` uses the mediator in the mediator model", t.name()));
            }
        }
        if let Some(trials) = &self.trials {
            if self.family != Family::Binomial {
                return bad("trials are only meaningful for the binomial family".into());
            }
            if *trials == self.response.column() || *trials == Column::Outcome {
                return bad("the response cannot be its own trials column".into());
            }
        }
        Ok(())
    }
}

/// Column source resolved against a schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Src {
    Treatment,
    Cov(usize),
    Mediator,
    Outcome,
}

#[derive(Debug, Clone, Copy)]
enum CTerm {
    One,
    Var(Src),
    Prod(Src, Src),
}

/// Values of one row after overrides, as the model sees them.
#[derive(Debug, Clone, Copy)]
pub struct RowValues<'a> {
    pub treatment: f64,
    pub covariates: &'a [f64],
    pub mediator: f64,
    pub outcome: f64,
}

impl<'a> RowValues<'a> {
    pub fn of(r: &'a ExperimentRecord) -> Self {
        RowValues {
            treatment: r.treatment as f64,
            covariates: &r.covariates,
            mediator: r.mediator as f64,
            outcome: r.outcome as f64,
        }
    }
}

impl Src {
    #[inline]
    fn get(self, row: &RowValues<'_>) -> f64 {
        match self {
            Src::Treatment => row.treatment,
            Src::Cov(i) => row.covariates[i],
            Src::Mediator => row.mediator,
            Src::Outcome => row.outcome,
        }
    }
}

/// A model specification bound to a covariate schema, ready to evaluate
/// linear predictors and means row by row.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    family: Family,
    terms: Vec<CTerm>,
    response: Src,
    trials: Option<Src>,
}

fn resolve(schema: &[Covariate], col: &Column) -> Result<Src> {
    Ok(match col {
        Column::Treatment => Src::Treatment,
        Column::Mediator => Src::Mediator,
        Column::Outcome => Src::Outcome,
        Column::Covariate(name) => Src::Cov(
            schema
                .iter()
                .position(|c| &c.name == name)
                .ok_or_else(|| Error::Config(format!("unknown covariate `{name}`")))?,
        ),
    })
}

impl CompiledModel {
    pub fn new(spec: &ModelSpec, schema: &[Covariate]) -> Result<Self> {
        spec.validate()?;
        let terms = spec
            .terms
            .iter()
            .map(|t| {
                Ok(match t {
                    Term::Intercept => CTerm::One,
                    Term::Main(c) => CTerm::Var(resolve(schema, c)?),
                    Term::Product(a, b) => CTerm::Prod(resolve(schema, a)?, resolve(schema, b)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CompiledModel {
            family: spec.family,
            terms,
            response: resolve(schema, &spec.response.column())?,
            trials: spec.trials.as_ref().map(|c| resolve(schema, c)).transpose()?,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    #[inline]
    fn term_value(t: CTerm, row: &RowValues<'_>) -> f64 {
        match t {
            CTerm::One => 1.0,
            CTerm::Var(s) => s.get(row),
            CTerm::Prod(a, b) => a.get(row) * b.get(row),
        }
    }

    #[inline]
    pub fn linear_predictor(&self, beta: &[f64], row: &RowValues<'_>) -> f64 {
        self.terms
            .iter()
            .zip(beta)
            .map(|(&t, b)| b * Self::term_value(t, row))
            .sum()
    }

    #[inline]
    pub fn trials(&self, row: &RowValues<'_>) -> f64 {
        self.trials.map_or(1.0, |s| s.get(row))
    }

    /// Expected response. For binomial models this is the expected count,
    /// trials × probability.
    #[inline]
    pub fn mean(&self, beta: &[f64], row: &RowValues<'_>) -> f64 {
        let eta = self.linear_predictor(beta, row);
        match self.family {
            Family::Binomial => self.trials(row) * logistic(eta),
            f => f.inverse_link(eta),
        }
    }

    /// Inverse-link value without the trials multiplier.
    #[inline]
    pub fn link_mean(&self, beta: &[f64], row: &RowValues<'_>) -> f64 {
        self.family.inverse_link(self.linear_predictor(beta, row))
    }

    fn response(&self, row: &RowValues<'_>) -> f64 {
        self.response.get(row)
    }
}

/// Design matrix over the rows that carry likelihood information.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub spec: ModelSpec,
    pub columns: Vec<String>,
    /// Rows not masked out, in dataset order.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub trials: Option<DVector<f64>>,
    /// One flag per dataset row; `true` marks a row excluded from the fit
    /// (binomial rows with zero trials).
    pub mask: Vec<bool>,
    /// Optional frequency weights, one per kept row.
    pub weights: Option<DVector<f64>>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Dataset row indices of the kept rows.
    pub fn kept_rows(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
            .collect()
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }
}

pub fn build_design(dataset: &Dataset, spec: &ModelSpec) -> Result<DesignMatrix> {
    let model = CompiledModel::new(spec, dataset.schema())?;
    let mask: Vec<bool> = dataset
        .records()
        .iter()
        .map(|r| model.trials.is_some() && model.trials(&RowValues::of(r)) == 0.0)
        .collect();
    let kept: Vec<&ExperimentRecord> = dataset
        .records()
        .iter()
        .zip(&mask)
        .filter_map(|(r, &m)| (!m).then_some(r))
        .collect();
    let p = model.terms.len();
    let x = DMatrix::from_fn(kept.len(), p, |i, j| {
        CompiledModel::term_value(model.terms[j], &RowValues::of(kept[i]))
    });
    let y = DVector::from_iterator(kept.len(), kept.iter().map(|r| model.response(&RowValues::of(r))));
    let trials = model
        .trials
        .map(|_| DVector::from_iterator(kept.len(), kept.iter().map(|r| model.trials(&RowValues::of(r)))));
    Ok(DesignMatrix {
        spec: spec.clone(),
        columns: spec.term_names(),
        x,
        y,
        trials,
        mask,
        weights: None,
    })
}

/// Replacement value for a column when predicting.
#[derive(Debug, Clone, PartialEq)]
pub enum OverrideValue {
    Scalar(f64),
    PerRow(Vec<f64>),
}

impl OverrideValue {
    fn at(&self, i: usize) -> f64 {
        match self {
            OverrideValue::Scalar(v) => *v,
            OverrideValue::PerRow(v) => v[i],
        }
    }
}

/// Column overrides applied before predicting, e.g. `treatment := 1`.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub(crate) treatment: Option<OverrideValue>,
    pub(crate) mediator: Option<OverrideValue>,
    pub(crate) covariates: Vec<(String, OverrideValue)>,
}

impl Overrides {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, column: Column, value: OverrideValue) -> Self {
        match column {
            Column::Treatment => self.treatment = Some(value),
            Column::Mediator => self.mediator = Some(value),
            Column::Covariate(name) => {
                self.covariates.retain(|(n, _)| *n != name);
                self.covariates.push((name, value));
            }
            Column::Outcome => {
                // the outcome never enters a linear predictor; accepted and ignored
            }
        }
        self
    }

    pub(crate) fn resolve(&self, dataset: &Dataset) -> Result<Vec<(usize, &OverrideValue)>> {
        let n = dataset.len();
        let check = |v: &OverrideValue| match v {
            OverrideValue::PerRow(vals) if vals.len() != n => Err(Error::Config(format!(
                "per-row override has {} values for {n} rows",
                vals.len()
            ))),
            _ => Ok(()),
        };
        for v in self.treatment.iter().chain(&self.mediator) {
            check(v)?;
        }
        self.covariates
            .iter()
            .map(|(name, v)| {
                check(v)?;
                let idx = dataset
                    .covariate_index(name)
                    .ok_or_else(|| Error::Config(format!("unknown covariate `{name}`")))?;
                Ok((idx, v))
            })
            .collect()
    }

    pub(crate) fn apply_scalars(&self, i: usize, r: &ExperimentRecord, covs: &[(usize, &OverrideValue)], buf: &mut Vec<f64>) -> (f64, f64) {
        buf.clear();
        buf.extend_from_slice(&r.covariates);
        for (idx, v) in covs {
            buf[*idx] = v.at(i);
        }
        (
            self.treatment.as_ref().map_or(r.treatment as f64, |v| v.at(i)),
            self.mediator.as_ref().map_or(r.mediator as f64, |v| v.at(i)),
        )
    }
}
