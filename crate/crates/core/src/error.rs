use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Invariants checked when records are loaded or constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    TreatmentNotBinary,
    OutcomeExceedsMediator,
    CovariateArity,
    CovariateNotBinary,
    CovariateNotFinite,
    DuplicateUnitId,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::TreatmentNotBinary => "treatment not in {0,1}",
            Rule::OutcomeExceedsMediator => "outcome exceeds mediator",
            Rule::CovariateArity => "covariate arity does not match schema",
            Rule::CovariateNotBinary => "binary covariate not in {0,1}",
            Rule::CovariateNotFinite => "numeric covariate is not finite",
            Rule::DuplicateUnitId => "duplicate unit_id",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    /// `line` is the 1-based line in the source file, or the 1-based record
    /// position for in-memory datasets.
    #[error("line {line}: validation error: {rule}")]
    Validation { line: usize, rule: Rule },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("IRLS did not converge after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        last_coefficients: Vec<f64>,
    },

    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("separation detected: coefficient `{column}` diverged")]
    Separation { column: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by the numbers rather than the inputs'
    /// shape: non-convergence, rank deficiency, separation and friends.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonConvergence { .. }
            | Error::RankDeficient { .. }
            | Error::Separation { .. }
            | Error::Numerical(_)
            | Error::Estimation(_) => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// True for malformed or invariant-violating input data.
    pub fn is_data(&self) -> bool {
        match self {
            Error::Parse { .. } | Error::Validation { .. } | Error::Io(_) => true,
            Error::Stage { source, .. } => source.is_data(),
            _ => false,
        }
    }
}
