//! The end-to-end report: simulate the scenario, summarize it, run the
//! baselines, the two-stage estimates and both sensitivity curves.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use mediation_core::data::{self, CellSummary};
use mediation_core::mediate::{self, BaselineOptions, EffectEstimate, MediationResult};
use mediation_core::sense::{self, RhoGrid, SensitivityGrid};
use mediation_core::sim::{self, ScenarioConfig};
use mediation_core::{Dataset, MediationConfig, Seed};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{
    json_bytes, load_scenario, mediation_bundle, mediation_json, sha256_hex, summary_json, write_file, CliError,
    Flags, Provenance, StageExt,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSettings {
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub draws: usize,
    pub mediator_sims: usize,
    pub n_days: u32,
    pub ci_level: f64,
    pub grid: RhoGrid,
    pub bootstrap_reps: usize,
    /// Worker threads for the parallel stages; never changes the output.
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl ReportSettings {
    /// Default scenario and desk-scale settings.
    pub fn new(seed: u64) -> Self {
        ReportSettings {
            scenario: sim::default_scenario(),
            seed,
            draws: 1000,
            mediator_sims: 1,
            n_days: 30,
            ci_level: 0.95,
            grid: RhoGrid::default(),
            bootstrap_reps: 500,
            workers: None,
        }
    }

    pub fn from_flags(f: &Flags) -> Result<Self, CliError> {
        Ok(ReportSettings {
            scenario: load_scenario(f.config.as_deref())?,
            seed: f.seed,
            draws: f.draws,
            mediator_sims: f.mediator_sims,
            n_days: f.days,
            ci_level: f.ci,
            grid: f.rho_grid(),
            bootstrap_reps: f.bootstrap,
            workers: None,
        })
    }

    pub fn provenance(&self) -> Provenance {
        let config = json!({ "subcommand": "report", "settings": self });
        Provenance::new(self.seed, &config)
    }

    fn mediation_config(&self) -> MediationConfig {
        let mut config = MediationConfig::new(&[self.scenario.covariate_name.as_str()]);
        config.n_param_draws = self.draws;
        config.mediator_sims = self.mediator_sims;
        config.ci_level = self.ci_level;
        config.scaling.n_days = f64::from(self.n_days);
        config.workers = self.workers;
        config
    }

    fn sensitivity_config(&self, covariates: &[&str]) -> sense::SensitivityConfig {
        let mut config = sense::SensitivityConfig::new(covariates);
        config.grid = self.grid;
        config.bootstrap_reps = self.bootstrap_reps;
        config.ci_level = self.ci_level;
        config.workers = self.workers;
        config
    }
}

/// One row of the effect comparison table. Serialized with values rounded
/// to 3 decimals; the struct keeps full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Table2Row {
    pub method: String,
    pub per_day: f64,
    pub p_value: f64,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

impl Serialize for Table2Row {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        json!({
            "method": self.method,
            "per_day": round3(self.per_day),
            "p_value": round3(self.p_value),
        })
        .serialize(s)
    }
}

pub const DATA_FILE: &str = "data.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE2_FILE: &str = "table2.json";
pub const MEDIATION_FILE: &str = "mediation.json";
pub const SENSITIVITY_WITH_FILE: &str = "sensitivity_with_confounder.csv";
pub const SENSITIVITY_WITHOUT_FILE: &str = "sensitivity_without_confounder.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone)]
pub struct Report {
    pub settings: ReportSettings,
    pub provenance: Provenance,
    pub dataset: Dataset,
    pub summary: Vec<CellSummary>,
    pub ate: EffectEstimate,
    pub adjusted: EffectEstimate,
    /// `all`, then `covariate=1` and `covariate=0`.
    pub mediation: Vec<(String, MediationResult)>,
    pub sensitivity_with: SensitivityGrid,
    pub sensitivity_without: SensitivityGrid,
    pub table2: Vec<Table2Row>,
    /// Wall-clock time per stage, in run order. Not written to disk.
    pub timings: Vec<(&'static str, Duration)>,
}

fn timed<T>(timings: &mut Vec<(&'static str, Duration)>, stage: &'static str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.push((stage, start.elapsed()));
    out
}

pub fn build_report(settings: &ReportSettings) -> Result<Report, CliError> {
    let seed = Seed(settings.seed);
    let covariate = settings.scenario.covariate_name.as_str();
    let mut timings = Vec::new();
    let t = &mut timings;
    let dataset = timed(t, "simulate", || sim::simulate_with_workers(&settings.scenario, seed, settings.workers))
        .stage("simulate")?;
    let summary = timed(t, "summarize", || data::cell_summary(&dataset, &[covariate])).stage("summarize")?;

    let opts = BaselineOptions {
        ci_level: settings.ci_level,
        n_days: f64::from(settings.n_days),
        population: None,
    };
    let ate = timed(t, "difference in means", || mediate::ate_diff_means(&dataset, &opts))
        .stage("difference in means")?;
    let adjusted = timed(t, "adjusted regression", || mediate::adjusted_direct(&dataset, true, &opts))
        .stage("adjusted regression")?;

    let config = settings.mediation_config();
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let mediation = timed(t, "mediation", || mediation_bundle(&dataset, &config, &[covariate], seed))?;

    let with = settings.sensitivity_config(&[covariate]);
    let sensitivity_with = timed(t, "sensitivity (with confounder)", || {
        sense::sensitivity_curve(&dataset, &with, seed)
    })
    .stage("sensitivity (with confounder)")?;
    let without = settings.sensitivity_config(&[]);
    let sensitivity_without = timed(t, "sensitivity (without confounder)", || {
        sense::sensitivity_curve(&dataset, &without, seed)
    })
    .stage("sensitivity (without confounder)")?;

    let subgroup = |level: u8| {
        let key = format!("{covariate}={level}");
        &mediation.iter().find(|(k, _)| *k == key).expect("bundle has both levels").1
    };
    let table2 = vec![
        Table2Row {
            method: "No Adjustment - ATE".into(),
            per_day: ate.per_day,
            p_value: ate.p_value,
        },
        Table2Row {
            method: "Linear Regression".into(),
            per_day: adjusted.per_day,
            p_value: adjusted.p_value,
        },
        Table2Row {
            method: format!("2-Stage Method - {covariate}=1"),
            per_day: subgroup(1).ade_avg.per_day,
            p_value: subgroup(1).ade_avg.p_value,
        },
        Table2Row {
            method: format!("2-Stage Method - {covariate}=0"),
            per_day: subgroup(0).ade_avg.per_day,
            p_value: subgroup(0).ade_avg.p_value,
        },
    ];

    Ok(Report {
        settings: settings.clone(),
        provenance: settings.provenance(),
        dataset,
        summary,
        ate,
        adjusted,
        mediation,
        sensitivity_with,
        sensitivity_without,
        table2,
        timings,
    })
}

impl Report {
    pub fn timing(&self, stage: &str) -> Option<Duration> {
        self.timings.iter().find(|(s, _)| *s == stage).map(|(_, d)| *d)
    }

    /// Every output file in write order, `provenance.json` last.
    pub fn files(&self) -> Vec<(&'static str, Vec<u8>)> {
        let p = &self.provenance;
        let table2 = json!({ "provenance": p, "rows": self.table2 });
        let mut files = vec![
            (DATA_FILE, data::to_csv_bytes(&self.dataset)),
            (SUMMARY_FILE, json_bytes(&summary_json(&self.summary, p))),
            (TABLE2_FILE, json_bytes(&table2)),
            (MEDIATION_FILE, json_bytes(&mediation_json(&self.mediation, p))),
            (SENSITIVITY_WITH_FILE, self.sensitivity_with.to_csv().into_bytes()),
            (SENSITIVITY_WITHOUT_FILE, self.sensitivity_without.to_csv().into_bytes()),
        ];
        let hashes: serde_json::Map<String, Value> = files
            .iter()
            .map(|(name, bytes)| (name.to_string(), sha256_hex(bytes).into()))
            .collect();
        let sensitivity_meta = |g: &SensitivityGrid| {
            json!({
                "covariates": g.config.components.covariates,
                "treatment_interactions": g.config.components.interactions,
                "stage_models": "gaussian-identity",
                "components": g.components,
                "zero_crossing": g.zero_crossing,
                "bootstrap_reps": g.bootstrap_reps,
                "degenerate_resamples": g.degenerate_resamples,
            })
        };
        let provenance = json!({
            "provenance": p,
            "settings": self.settings,
            "files": hashes,
            "sensitivity": {
                SENSITIVITY_WITH_FILE: sensitivity_meta(&self.sensitivity_with),
                SENSITIVITY_WITHOUT_FILE: sensitivity_meta(&self.sensitivity_without),
            },
        });
        files.push((PROVENANCE_FILE, json_bytes(&provenance)));
        files
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        let files = self.files();
        fs::create_dir_all(dir).map_err(|source| CliError::Output {
            path: dir.to_path_buf(),
            source,
        })?;
        for (name, bytes) in files {
            write_file(&dir.join(name), &bytes)?;
        }
        Ok(())
    }
}
