use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser};
use mediation_core::mediate::MIN_DRAWS_FOR_CI;
use mediation_core::sense::{RhoGrid, MIN_BOOTSTRAP_FOR_BANDS};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "mediation",
    version,
    about = "Two-stage causal mediation analysis for randomized experiments",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    subcommand: Subcommand,

    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::Subcommand)]
pub enum Subcommand {
    /// Generate a synthetic experiment dataset (CSV).
    Simulate,
    /// Per-cell summary of a dataset (JSON).
    Summarize,
    /// Two-stage ACME/ADE/ATE estimates, overall and per binary covariate level (JSON).
    Mediate,
    /// Difference in means and the mediator-adjusted regression (JSON).
    Baseline,
    /// ACME/ADE curves over the rho grid with bootstrap bands (CSV).
    Sensitivity,
    /// Simulate and run every stage, writing the full report into --out-dir.
    Report,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Summarize => "summarize",
            Subcommand::Mediate => "mediate",
            Subcommand::Baseline => "baseline",
            Subcommand::Sensitivity => "sensitivity",
            Subcommand::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct Flags {
    /// Scenario config JSON (simulate, report); defaults to the built-in scenario.
    #[arg(long, value_name = "PATH", global = true)]
    pub config: Option<PathBuf>,

    /// Input dataset CSV.
    #[arg(long, value_name = "PATH", global = true)]
    pub data: Option<PathBuf>,

    /// Output file; stdout when omitted.
    #[arg(long, value_name = "PATH", global = true)]
    pub out: Option<PathBuf>,

    /// Output directory for `report`.
    #[arg(long = "out-dir", value_name = "PATH", global = true)]
    pub out_dir: Option<PathBuf>,

    #[arg(long, value_name = "U64", default_value_t = 0, global = true)]
    pub seed: u64,

    /// Quasi-Bayesian parameter draws (at least 100).
    #[arg(long, value_name = "INT", default_value_t = 1000, global = true)]
    pub draws: usize,

    /// Simulated mediators per unit and draw.
    #[arg(long = "mediator-sims", value_name = "INT", default_value_t = 1, global = true)]
    pub mediator_sims: usize,

    /// Days the experiment ran, for per-day scaling.
    #[arg(long, value_name = "INT", default_value_t = 30, global = true)]
    pub days: u32,

    /// Covariates to adjust for; defaults to every dataset covariate.
    #[arg(long, value_name = "NAME[,NAME...]|none", global = true)]
    pub covariates: Option<String>,

    #[arg(long = "rho-min", value_name = "F", default_value_t = -0.9, allow_negative_numbers = true, global = true)]
    pub rho_min: f64,

    #[arg(long = "rho-max", value_name = "F", default_value_t = 0.9, allow_negative_numbers = true, global = true)]
    pub rho_max: f64,

    #[arg(long = "rho-step", value_name = "F", default_value_t = 0.1, global = true)]
    pub rho_step: f64,

    /// Bootstrap resamples for the sensitivity bands (at least 100).
    #[arg(long, value_name = "INT", default_value_t = 500, global = true)]
    pub bootstrap: usize,

    /// Confidence level.
    #[arg(long, value_name = "FLOAT", default_value_t = 0.95, global = true)]
    pub ci: f64,
}

impl Flags {
    pub fn rho_grid(&self) -> RhoGrid {
        RhoGrid {
            min: self.rho_min,
            max: self.rho_max,
            step: self.rho_step,
        }
    }

    /// `None` means every covariate in the dataset.
    pub fn covariate_list(&self) -> Option<Vec<String>> {
        let raw = self.covariates.as_deref()?.trim();
        if raw.eq_ignore_ascii_case("none") {
            return Some(Vec::new());
        }
        Some(raw.split(',').map(|s| s.trim().to_string()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub subcommand: Subcommand,
    pub flags: Flags,
}

pub fn usage() -> String {
    Cli::command().render_long_help().to_string()
}

/// Parses and validates a full argument vector (program name first).
pub fn parse_args<I, T>(argv: I) -> Result<Command, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CliError::Info(e.to_string()),
        ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => CliError::Usage(usage()),
        _ => CliError::Usage(format!("{}\n{}", e.render().to_string().trim_end(), usage())),
    })?;
    let command = Command {
        subcommand: cli.subcommand,
        flags: cli.flags,
    };
    validate(&command)?;
    Ok(command)
}

fn validate(cmd: &Command) -> Result<(), CliError> {
    let f = &cmd.flags;
    for (flag, path) in [
        ("--config", &f.config),
        ("--data", &f.data),
        ("--out", &f.out),
        ("--out-dir", &f.out_dir),
    ] {
        if path.as_ref().is_some_and(|p| p.as_os_str().is_empty()) {
            return Err(CliError::Usage(format!("{flag} must not be empty\n{}", usage())));
        }
    }
    let needs = |flag: &str, present: bool| {
        if present {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "`{}` requires {flag}\n{}",
                cmd.subcommand.name(),
                usage()
            )))
        }
    };
    match cmd.subcommand {
        Subcommand::Simulate => {}
        Subcommand::Summarize | Subcommand::Mediate | Subcommand::Baseline | Subcommand::Sensitivity => {
            needs("--data", f.data.is_some())?
        }
        Subcommand::Report => needs("--out-dir", f.out_dir.is_some())?,
    }

    let config = |msg: String| Err(CliError::Config(msg));
    if f.draws < MIN_DRAWS_FOR_CI {
        return config(format!(
            "--draws {} is below {MIN_DRAWS_FOR_CI}, the minimum for confidence intervals",
            f.draws
        ));
    }
    if f.mediator_sims == 0 {
        return config("--mediator-sims must be at least 1".into());
    }
    if f.days == 0 {
        return config("--days must be at least 1".into());
    }
    if !(f.ci > 0.0 && f.ci < 1.0) {
        return config(format!("--ci {} must lie in (0, 1)", f.ci));
    }
    if f.bootstrap < MIN_BOOTSTRAP_FOR_BANDS {
        return config(format!(
            "--bootstrap {} is below {MIN_BOOTSTRAP_FOR_BANDS}, the minimum for bands",
            f.bootstrap
        ));
    }
    if let Some(names) = f.covariate_list() {
        if names.iter().any(String::is_empty) {
            return config("--covariates has an empty name".into());
        }
    }
    f.rho_grid().values().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(())
}
