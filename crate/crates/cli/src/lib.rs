//! Command-line front end: argument parsing, single-stage subcommands and the
//! end-to-end `report`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 invalid input
//! data, 3 numerical failure (non-convergence, rank deficiency, separation).

mod args;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use mediation_core::data::{self, CellSummary, CovariateKind};
use mediation_core::mediate::{self, BaselineOptions};
use mediation_core::sense::{self, SensitivityConfig};
use mediation_core::sim::{self, ScenarioConfig};
use mediation_core::{Dataset, MediationConfig, Seed};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use args::{parse_args, usage, Command, Flags, Subcommand};
pub use report::{build_report, Report, ReportSettings, Table2Row};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Help or version text requested explicitly.
    #[error("{0}")]
    Info(String),

    #[error("{0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot read {}: {source}", path.display())]
    Input { path: PathBuf, source: io::Error },

    #[error("cannot write {}: {source}", path.display())]
    Output { path: PathBuf, source: io::Error },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: mediation_core::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Info(_) => 0,
            CliError::Usage(_) | CliError::Config(_) | CliError::Output { .. } => 1,
            CliError::Input { .. } => 2,
            CliError::Stage { source, .. } if source.is_data() => 2,
            CliError::Stage { source, .. } if source.is_numerical() => 3,
            CliError::Stage { .. } => 1,
        }
    }
}

/// Attaches a stage label to core errors.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T, CliError>;
}

impl<T> StageExt<T> for mediation_core::Result<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T, CliError> {
        self.map_err(|source| CliError::Stage {
            stage: stage.into(),
            source,
        })
    }
}

/// Seed, configuration hash and version stamped into every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

impl Provenance {
    /// `run_config` is hashed in its compact JSON form (keys sorted).
    pub fn new(seed: u64, run_config: &Value) -> Self {
        Provenance {
            seed,
            config_hash: sha256_hex(run_config.to_string().as_bytes()),
            version: VERSION.to_string(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn json_bytes(value: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("json values serialize");
    s.push('\n');
    s.into_bytes()
}

/// Parses `argv`, runs the command and reports errors on stderr. Returns the
/// process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let result = parse_args(argv).and_then(|cmd| run(&cmd));
    match result {
        Ok(()) => 0,
        Err(CliError::Info(text)) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: &Command) -> Result<(), CliError> {
    let f = &cmd.flags;
    match cmd.subcommand {
        Subcommand::Simulate => run_simulate(f),
        Subcommand::Summarize => run_summarize(f),
        Subcommand::Mediate => run_mediate(f),
        Subcommand::Baseline => run_baseline(f),
        Subcommand::Sensitivity => run_sensitivity(f),
        Subcommand::Report => {
            let settings = ReportSettings::from_flags(f)?;
            let report = build_report(&settings)?;
            report.write_to(f.out_dir.as_deref().expect("validated"))
        }
    }
}

pub(crate) fn load_scenario(path: Option<&Path>) -> Result<ScenarioConfig, CliError> {
    let Some(path) = path else {
        return Ok(sim::default_scenario());
    };
    let text = fs::read_to_string(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    let config = ScenarioConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

fn load_data(f: &Flags) -> Result<(Dataset, String), CliError> {
    let path = f.data.as_deref().expect("validated");
    let bytes = fs::read(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    let dataset = data::load_csv(bytes.as_slice()).stage(format!("loading {}", path.display()))?;
    Ok((dataset, sha256_hex(&bytes)))
}

/// Names from `--covariates`, or every dataset covariate.
fn covariate_names(f: &Flags, dataset: &Dataset) -> Result<Vec<String>, CliError> {
    let names = f
        .covariate_list()
        .unwrap_or_else(|| dataset.schema().iter().map(|c| c.name.clone()).collect());
    for n in &names {
        if dataset.covariate_index(n).is_none() {
            return Err(CliError::Config(format!("unknown covariate `{n}`")));
        }
    }
    Ok(names)
}

fn as_strs(names: &[String]) -> Vec<&str> {
    names.iter().map(String::as_str).collect()
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => write_file(path, bytes),
        None => io::stdout().write_all(bytes).map_err(|source| CliError::Output {
            path: PathBuf::from("<stdout>"),
            source,
        }),
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

/// CSV outputs cannot carry metadata, so a `<file>.provenance.json` sidecar
/// records it instead.
fn emit_csv(out: Option<&Path>, bytes: &[u8], provenance: &Provenance) -> Result<(), CliError> {
    emit(out, bytes)?;
    if let Some(path) = out {
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".provenance.json");
        let file = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let value = json!({
            "provenance": provenance,
            "files": { file: sha256_hex(bytes) },
        });
        write_file(Path::new(&sidecar), &json_bytes(&value))?;
    }
    Ok(())
}

fn analysis_config(f: &Flags, subcommand: Subcommand, data_sha256: &str, covariates: &[String]) -> Value {
    json!({
        "subcommand": subcommand.name(),
        "data_sha256": data_sha256,
        "covariates": covariates,
        "draws": f.draws,
        "mediator_sims": f.mediator_sims,
        "days": f.days,
        "ci": f.ci,
        "rho_grid": f.rho_grid(),
        "bootstrap": f.bootstrap,
    })
}

fn run_simulate(f: &Flags) -> Result<(), CliError> {
    let scenario = load_scenario(f.config.as_deref())?;
    let dataset = sim::simulate(&scenario, Seed(f.seed)).stage("simulate")?;
    let provenance = Provenance::new(f.seed, &json!({ "subcommand": "simulate", "scenario": scenario }));
    emit_csv(f.out.as_deref(), &data::to_csv_bytes(&dataset), &provenance)
}

/// Table-1 style rows: one object per cell with the covariate values inline.
pub fn summary_json(cells: &[CellSummary], provenance: &Provenance) -> Value {
    let rows: Vec<Value> = cells
        .iter()
        .map(|c| {
            let mut row = serde_json::Map::new();
            row.insert("treatment".into(), c.key.treatment.into());
            for (name, v) in &c.key.covariates {
                row.insert(name.clone(), (*v).into());
            }
            row.insert("n_units".into(), c.n_units.into());
            row.insert("share_of_visitors".into(), c.share_of_visitors.into());
            row.insert("bookings_per_visitor".into(), c.bookings_per_visitor.into());
            row.insert("cancellations_per_booking".into(), json!(c.cancellations_per_booking));
            row.insert("cancellations_per_visitor".into(), c.cancellations_per_visitor.into());
            Value::Object(row)
        })
        .collect();
    json!({ "provenance": provenance, "cells": rows })
}

fn run_summarize(f: &Flags) -> Result<(), CliError> {
    let (dataset, sha) = load_data(f)?;
    let names = match f.covariate_list() {
        Some(names) => names,
        None => dataset
            .schema()
            .iter()
            .filter(|c| c.kind == CovariateKind::Binary)
            .map(|c| c.name.clone())
            .collect(),
    };
    let cells = data::cell_summary(&dataset, &as_strs(&names)).map_err(|e| CliError::Config(e.to_string()))?;
    let provenance = Provenance::new(f.seed, &analysis_config(f, Subcommand::Summarize, &sha, &names));
    emit(f.out.as_deref(), &json_bytes(&summary_json(&cells, &provenance)))
}

fn mediation_config(f: &Flags, covariates: &[&str]) -> MediationConfig {
    let mut config = MediationConfig::new(covariates);
    config.n_param_draws = f.draws;
    config.mediator_sims = f.mediator_sims;
    config.ci_level = f.ci;
    config.scaling.n_days = f64::from(f.days);
    config
}

/// The overall estimate plus one conditional estimate per level of every
/// binary covariate, keyed `all` and `name=level`.
pub fn mediation_bundle(
    dataset: &Dataset,
    base: &MediationConfig,
    covariates: &[&str],
    seed: Seed,
) -> Result<Vec<(String, mediate::MediationResult)>, CliError> {
    let mut out = vec![(
        "all".to_string(),
        mediate::estimate(dataset, base, seed).stage("mediation (all units)")?,
    )];
    for name in covariates {
        let i = dataset.covariate_index(name).expect("validated covariate");
        if dataset.schema()[i].kind != CovariateKind::Binary {
            continue;
        }
        for level in [1u8, 0] {
            let key = format!("{name}={level}");
            let mut config = base.clone();
            config.conditional_at = Some([(name.to_string(), f64::from(level))].into());
            let result = mediate::conditional_estimate(dataset, &config, seed).stage(format!("mediation ({key})"))?;
            out.push((key, result));
        }
    }
    Ok(out)
}

pub fn mediation_json(bundle: &[(String, mediate::MediationResult)], provenance: &Provenance) -> Value {
    let estimates: serde_json::Map<String, Value> =
        bundle.iter().map(|(k, r)| (k.clone(), r.to_json())).collect();
    json!({ "provenance": provenance, "estimates": estimates })
}

fn run_mediate(f: &Flags) -> Result<(), CliError> {
    let (dataset, sha) = load_data(f)?;
    let names = covariate_names(f, &dataset)?;
    let config = mediation_config(f, &as_strs(&names));
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let bundle = mediation_bundle(&dataset, &config, &as_strs(&names), Seed(f.seed))?;
    let provenance = Provenance::new(f.seed, &analysis_config(f, Subcommand::Mediate, &sha, &names));
    emit(f.out.as_deref(), &json_bytes(&mediation_json(&bundle, &provenance)))
}

fn baseline_options(f: &Flags) -> BaselineOptions {
    BaselineOptions {
        ci_level: f.ci,
        n_days: f64::from(f.days),
        population: None,
    }
}

fn run_baseline(f: &Flags) -> Result<(), CliError> {
    let (dataset, sha) = load_data(f)?;
    let names = covariate_names(f, &dataset)?;
    let opts = baseline_options(f);
    let ate = mediate::ate_diff_means(&dataset, &opts).stage("difference in means")?;
    let selected = dataset
        .select_covariates(&as_strs(&names))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let adjusted = mediate::adjusted_direct(&selected, !names.is_empty(), &opts).stage("adjusted regression")?;
    let provenance = Provenance::new(f.seed, &analysis_config(f, Subcommand::Baseline, &sha, &names));
    let value = json!({
        "provenance": provenance,
        "covariates": names,
        "ate": ate,
        "adjusted_regression": adjusted,
    });
    emit(f.out.as_deref(), &json_bytes(&value))
}

pub(crate) fn sensitivity_config(f: &Flags, covariates: &[&str]) -> SensitivityConfig {
    let mut config = SensitivityConfig::new(covariates);
    config.grid = f.rho_grid();
    config.bootstrap_reps = f.bootstrap;
    config.ci_level = f.ci;
    config
}

fn run_sensitivity(f: &Flags) -> Result<(), CliError> {
    let (dataset, sha) = load_data(f)?;
    let names = covariate_names(f, &dataset)?;
    let config = sensitivity_config(f, &as_strs(&names));
    let grid = sense::sensitivity_curve(&dataset, &config, Seed(f.seed)).stage("sensitivity")?;
    let provenance = Provenance::new(f.seed, &analysis_config(f, Subcommand::Sensitivity, &sha, &names));
    emit_csv(f.out.as_deref(), grid.to_csv().as_bytes(), &provenance)
}
