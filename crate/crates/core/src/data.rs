//! Experiment records, CSV I/O and per-cell summaries.
//!
//! The CSV layout is `unit_id,treatment,<covariates...>,bookings,cancellations`
//! with LF line endings and no quoting. Bookings are the mediator and
//! cancellations the outcome; cancellations are stored per visitor.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Rule};

pub const UNIT_ID_COLUMN: &str = "unit_id";
pub const TREATMENT_COLUMN: &str = "treatment";
pub const MEDIATOR_COLUMN: &str = "bookings";
pub const OUTCOME_COLUMN: &str = "cancellations";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Binary,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
}

impl Covariate {
    pub fn binary(name: impl Into<String>) -> Self {
        Covariate {
            name: name.into(),
            kind: CovariateKind::Binary,
        }
    }

    pub fn numeric(name: impl Into<String>) -> Self {
        Covariate {
            name: name.into(),
            kind: CovariateKind::Numeric,
        }
    }
}

/// One visitor.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub unit_id: u64,
    pub treatment: u8,
    /// Values in schema order; binary covariates hold 0.0 or 1.0.
    pub covariates: Vec<f64>,
    /// Bookings.
    pub mediator: u64,
    /// Cancellations.
    pub outcome: u64,
}

/// A validated, immutable collection of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ExperimentRecord>,
    schema: Vec<Covariate>,
}

impl Dataset {
    /// Validates every record against the schema and the count invariants.
    /// Validation errors report the 1-based record position as `line`.
    pub fn new(schema: Vec<Covariate>, records: Vec<ExperimentRecord>) -> Result<Self> {
        check_schema(&schema)?;
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            validate_record(&schema, r).map_err(|rule| Error::Validation { line: i + 1, rule })?;
            if !seen.insert(r.unit_id) {
                return Err(Error::Validation {
                    line: i + 1,
                    rule: Rule::DuplicateUnitId,
                });
            }
        }
        Ok(Dataset { records, schema })
    }

    pub fn empty(schema: Vec<Covariate>) -> Result<Self> {
        Dataset::new(schema, Vec::new())
    }

    pub fn records(&self) -> &[ExperimentRecord] {
        &self.records
    }

    pub fn schema(&self) -> &[Covariate] {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    /// Same records with only the named covariates kept, in the given order.
    pub fn select_covariates(&self, names: &[&str]) -> Result<Dataset> {
        let idx = names
            .iter()
            .map(|n| {
                self.covariate_index(n)
                    .ok_or_else(|| Error::Config(format!("unknown covariate `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let schema = idx.iter().map(|&i| self.schema[i].clone()).collect();
        let records = self
            .records
            .iter()
            .map(|r| ExperimentRecord {
                covariates: idx.iter().map(|&i| r.covariates[i]).collect(),
                ..r.clone()
            })
            .collect();
        Ok(Dataset { records, schema })
    }

    /// Unchecked constructor for callers that derive records from an
    /// already-validated dataset.
    pub(crate) fn from_parts_unchecked(schema: Vec<Covariate>, records: Vec<ExperimentRecord>) -> Self {
        Dataset { records, schema }
    }
}

fn check_schema(schema: &[Covariate]) -> Result<()> {
    let reserved = [UNIT_ID_COLUMN, TREATMENT_COLUMN, MEDIATOR_COLUMN, OUTCOME_COLUMN];
    let mut names = HashSet::new();
    for c in schema {
        if c.name.is_empty() || reserved.contains(&c.name.as_str()) {
            return Err(Error::Config(format!("invalid covariate name `{}`", c.name)));
        }
        if !names.insert(c.name.as_str()) {
            return Err(Error::Config(format!("duplicate covariate `{}`", c.name)));
        }
    }
    Ok(())
}

fn validate_record(schema: &[Covariate], r: &ExperimentRecord) -> std::result::Result<(), Rule> {
    if r.treatment > 1 {
        return Err(Rule::TreatmentNotBinary);
    }
    if r.covariates.len() != schema.len() {
        return Err(Rule::CovariateArity);
    }
    for (c, &v) in schema.iter().zip(&r.covariates) {
        match c.kind {
            CovariateKind::Binary if v != 0.0 && v != 1.0 => return Err(Rule::CovariateNotBinary),
            CovariateKind::Numeric if !v.is_finite() => return Err(Rule::CovariateNotFinite),
            _ => {}
        }
    }
    if r.outcome > r.mediator {
        return Err(Rule::OutcomeExceedsMediator);
    }
    Ok(())
}

/// Reads a CSV dataset. Covariate columns whose values are all 0/1 are
/// typed binary, anything else numeric.
pub fn load_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut rows = reader.records();

    let header = match rows.next() {
        Some(h) => h.map_err(|e| csv_error(1, e))?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let cols: Vec<&str> = header.iter().collect();
    let n = cols.len();
    if n < 4
        || cols[0] != UNIT_ID_COLUMN
        || cols[1] != TREATMENT_COLUMN
        || cols[n - 2] != MEDIATOR_COLUMN
        || cols[n - 1] != OUTCOME_COLUMN
    {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header `{UNIT_ID_COLUMN},{TREATMENT_COLUMN},<covariates...>,{MEDIATOR_COLUMN},{OUTCOME_COLUMN}`, got `{}`",
                cols.join(",")
            ),
        });
    }
    let names: Vec<String> = cols[2..n - 2].iter().map(|s| s.to_string()).collect();

    let mut records = Vec::new();
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_error(line, e))?;
        if row.len() != n {
            return Err(Error::Parse {
                line,
                message: format!("expected {n} fields, found {}", row.len()),
            });
        }
        let int = |j: usize| -> Result<u64> {
            row[j].parse::<u64>().map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: `{}` is not a non-negative integer", cols[j], &row[j]),
            })
        };
        let treatment = int(1)?;
        let covariates = (2..n - 2)
            .map(|j| {
                row[j].parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("column `{}`: `{}` is not a number", cols[j], &row[j]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let record = ExperimentRecord {
            unit_id: int(0)?,
            treatment: u8::try_from(treatment).unwrap_or(u8::MAX),
            covariates,
            mediator: int(n - 2)?,
            outcome: int(n - 1)?,
        };
        records.push(record);
    }

    let schema = names
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let binary = records.iter().all(|r| r.covariates[k] == 0.0 || r.covariates[k] == 1.0);
            Covariate {
                name,
                kind: if binary { CovariateKind::Binary } else { CovariateKind::Numeric },
            }
        })
        .collect();

    // Dataset::new reports record positions; shift to file lines.
    Dataset::new(schema, records).map_err(|e| match e {
        Error::Validation { line, rule } => Error::Validation { line: line + 1, rule },
        other => other,
    })
}

fn csv_error(line: usize, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

pub fn header_line(schema: &[Covariate]) -> String {
    let mut h = format!("{UNIT_ID_COLUMN},{TREATMENT_COLUMN}");
    for c in schema {
        h.push(',');
        h.push_str(&c.name);
    }
    h.push_str(&format!(",{MEDIATOR_COLUMN},{OUTCOME_COLUMN}"));
    h
}

/// Writes the dataset in the layout `load_csv` reads. Binary covariates are
/// written as `0`/`1`, numeric ones in shortest round-trip form.
pub fn write_csv<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "{}", header_line(&dataset.schema))?;
    let mut line = String::new();
    for r in &dataset.records {
        line.clear();
        use std::fmt::Write as _;
        let _ = write!(line, "{},{}", r.unit_id, r.treatment);
        for (c, v) in dataset.schema.iter().zip(&r.covariates) {
            match c.kind {
                CovariateKind::Binary => {
                    let _ = write!(line, ",{}", *v as u8);
                }
                CovariateKind::Numeric => {
                    let _ = write!(line, ",{v:?}");
                }
            }
        }
        let _ = write!(line, ",{},{}", r.mediator, r.outcome);
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn to_csv_bytes(dataset: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(dataset, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Cell key: treatment arm plus the values of the summarized covariates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellKey {
    pub treatment: u8,
    pub covariates: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub key: CellKey,
    pub n_units: usize,
    pub share_of_visitors: f64,
    pub bookings_per_visitor: f64,
    /// `None` when the cell has no bookings.
    pub cancellations_per_booking: Option<f64>,
    pub cancellations_per_visitor: f64,
}

/// One summary per observed (treatment × covariate pattern) cell, ordered by
/// treatment and then by the covariate values in the order given.
pub fn cell_summary(dataset: &Dataset, covariate_names: &[&str]) -> Result<Vec<CellSummary>> {
    let mut idx = Vec::with_capacity(covariate_names.len());
    for name in covariate_names {
        let i = dataset
            .covariate_index(name)
            .ok_or_else(|| Error::Config(format!("unknown covariate `{name}`")))?;
        if dataset.schema[i].kind != CovariateKind::Binary {
            return Err(Error::Config(format!("covariate `{name}` is not binary")));
        }
        idx.push(i);
    }

    #[derive(Default)]
    struct Acc {
        n: usize,
        bookings: u64,
        cancellations: u64,
    }
    let mut cells: BTreeMap<(u8, Vec<u8>), Acc> = BTreeMap::new();
    for r in &dataset.records {
        let pattern = idx.iter().map(|&i| r.covariates[i] as u8).collect();
        let acc = cells.entry((r.treatment, pattern)).or_default();
        acc.n += 1;
        acc.bookings += r.mediator;
        acc.cancellations += r.outcome;
    }

    let total = dataset.len() as f64;
    Ok(cells
        .into_iter()
        .map(|((treatment, pattern), acc)| {
            let n = acc.n as f64;
            CellSummary {
                key: CellKey {
                    treatment,
                    covariates: covariate_names
                        .iter()
                        .map(|s| s.to_string())
                        .zip(pattern)
                        .collect(),
                },
                n_units: acc.n,
                share_of_visitors: n / total,
                bookings_per_visitor: acc.bookings as f64 / n,
                cancellations_per_booking: (acc.bookings > 0)
                    .then(|| acc.cancellations as f64 / acc.bookings as f64),
                cancellations_per_visitor: acc.cancellations as f64 / n,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, t: u8, x: f64, m: u64, y: u64) -> ExperimentRecord {
        ExperimentRecord {
            unit_id: id,
            treatment: t,
            covariates: vec![x],
            mediator: m,
            outcome: y,
        }
    }

    #[test]
    fn loads_minimal_file() {
        let csv = "unit_id,treatment,business,bookings,cancellations\n0,1,0,2,1\n1,0,1,0,0\n";
        let ds = load_csv(csv.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.schema(), &[Covariate::binary("business")]);
        assert_eq!(ds.records()[0], rec(0, 1, 0.0, 2, 1));
    }

    #[test]
    fn rejects_outcome_above_mediator() {
        let csv = "unit_id,treatment,business,bookings,cancellations\n0,1,0,1,2\n";
        let err = load_csv(csv.as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            Error::Validation {
                line: 2,
                rule: Rule::OutcomeExceedsMediator
            }
        ));
        assert!(err.to_string().contains("outcome exceeds mediator"));
    }

    #[test]
    fn rejects_bad_treatment_and_duplicates() {
        let csv = "unit_id,treatment,business,bookings,cancellations\n0,2,0,1,0\n";
        assert!(matches!(
            load_csv(csv.as_bytes()),
            Err(Error::Validation { line: 2, rule: Rule::TreatmentNotBinary })
        ));
        let csv = "unit_id,treatment,business,bookings,cancellations\n0,1,0,1,0\n1,0,0,0,0\n0,0,0,0,0\n";
        assert!(matches!(
            load_csv(csv.as_bytes()),
            Err(Error::Validation { line: 4, rule: Rule::DuplicateUnitId })
        ));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let csv = "unit_id,treatment,business,bookings,cancellations\n0,1,0,1,0\n1,1,0,x,0\n";
        assert!(matches!(load_csv(csv.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let csv = "unit_id,treatment,business,bookings,cancellations\n0,1,0,1\n";
        assert!(matches!(load_csv(csv.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let csv = "id,treatment,business,bookings,cancellations\n";
        assert!(matches!(load_csv(csv.as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(load_csv("".as_bytes()), Err(Error::Parse { line: 1, .. })));
        // missing value
        let csv = "unit_id,treatment,business,bookings,cancellations\n0,1,,1,0\n";
        assert!(matches!(load_csv(csv.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn numeric_covariates_are_inferred() {
        let csv = "unit_id,treatment,age,bookings,cancellations\n0,1,31.5,1,0\n1,0,1,0,0\n";
        let ds = load_csv(csv.as_bytes()).unwrap();
        assert_eq!(ds.schema()[0].kind, CovariateKind::Numeric);
        let back = load_csv(to_csv_bytes(&ds).as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_dataset_writes_header_only() {
        let ds = Dataset::empty(vec![Covariate::binary("business")]).unwrap();
        assert_eq!(
            String::from_utf8(to_csv_bytes(&ds)).unwrap(),
            "unit_id,treatment,business,bookings,cancellations\n"
        );
    }

    #[test]
    fn single_record_bytes() {
        let ds = Dataset::new(vec![Covariate::binary("business")], vec![rec(7, 1, 1.0, 3, 1)]).unwrap();
        assert_eq!(
            String::from_utf8(to_csv_bytes(&ds)).unwrap(),
            "unit_id,treatment,business,bookings,cancellations\n7,1,1,3,1\n"
        );
    }

    #[test]
    fn summary_hand_computed() {
        let ds = Dataset::new(
            vec![Covariate::binary("business")],
            vec![rec(0, 1, 1.0, 2, 1), rec(1, 1, 1.0, 0, 0)],
        )
        .unwrap();
        let cells = cell_summary(&ds, &["business"]).unwrap();
        assert_eq!(cells.len(), 1);
        let c = &cells[0];
        assert_eq!(c.bookings_per_visitor, 1.0);
        assert_eq!(c.cancellations_per_booking, Some(0.5));
        assert_eq!(c.cancellations_per_visitor, 0.5);
        assert_eq!(c.share_of_visitors, 1.0);
    }

    #[test]
    fn summary_zero_bookings_is_null() {
        let ds = Dataset::new(
            vec![Covariate::binary("business")],
            vec![rec(0, 0, 0.0, 0, 0), rec(1, 1, 0.0, 1, 0)],
        )
        .unwrap();
        let cells = cell_summary(&ds, &["business"]).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].cancellations_per_booking, None);
        let json = serde_json::to_value(&cells[0]).unwrap();
        assert!(json["cancellations_per_booking"].is_null());
        // absent business=1 cells are not emitted
        assert!(cells.iter().all(|c| c.key.covariates["business"] == 0));
    }

    #[test]
    fn summary_rejects_unknown_covariate() {
        let ds = Dataset::empty(vec![Covariate::binary("business")]).unwrap();
        assert!(matches!(cell_summary(&ds, &["age"]), Err(Error::Config(_))));
    }

    #[test]
    fn select_covariates_drops_columns() {
        let ds = Dataset::new(
            vec![Covariate::binary("business"), Covariate::numeric("age")],
            vec![ExperimentRecord {
                unit_id: 0,
                treatment: 0,
                covariates: vec![1.0, 40.0],
                mediator: 1,
                outcome: 0,
            }],
        )
        .unwrap();
        let only_age = ds.select_covariates(&["age"]).unwrap();
        assert_eq!(only_age.records()[0].covariates, vec![40.0]);
        let none = ds.select_covariates(&[]).unwrap();
        assert!(none.schema().is_empty());
    }
}
