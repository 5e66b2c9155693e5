//! Command-line front end for excursion-effect estimation.
//!
//! All subcommands read a single JSON config file with one section per
//! subcommand, so a config plus a seed fully determines any output:
//!
//! ```text
//! excursion fit <data.csv> <config.json> [-o fit.json]
//! excursion simulate <config.json> <out.csv>
//! excursion replicate <config.json> [-o report.csv]
//! excursion sweep <config.json> [-o sweep.csv]
//! excursion oracle <config.json>
//! ```
//!
//! Exit codes: 0 success, 2 schema/validation errors, 3 singular designs,
//! 4 config errors, 5 replicate/sweep/oracle failures. `--threads N` (or the
//! `EXCURSION_THREADS` environment variable) caps the worker pool; outputs
//! are byte-identical for any thread count.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use excursion::design::{ModelSpec, ReferencePolicy, WeightPlan};
use excursion::estimate::{
    fit, inference, EstimateError, EstimatorKind, FitOptions,
};
use excursion::mc::{
    reports_to_csv, reports_to_text, run, sweep, sweep_to_csv, RunSettings, SweepAxis,
};
use excursion::panel::{load_csv, write_csv, Schema};
use excursion::simulate::{generate, oracle_effect, true_effect, Estimand, ScenarioConfig, TruthSpec};

const EXIT_VALIDATION: u8 = 2;
const EXIT_SINGULAR: u8 = 3;
const EXIT_CONFIG: u8 = 4;
const EXIT_RUN: u8 = 5;

#[derive(Parser)]
#[command(name = "excursion", version, about = "Causal excursion effects for clustered MRTs")]
struct Cli {
    /// Worker threads (0 = all available cores). Overridden by EXCURSION_THREADS.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an estimator to a CSV dataset and write the result as JSON.
    Fit(FitArgs),
    /// Generate a scenario dataset as CSV.
    Simulate { config: PathBuf, out: PathBuf },
    /// Run a replication study and write a Table-style CSV report.
    Replicate {
        config: PathBuf,
        #[arg(short, long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Sweep coverage over group size or a variance ratio.
    Sweep {
        config: PathBuf,
        #[arg(short, long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Compare the Monte Carlo oracle against the analytic truth.
    Oracle { config: PathBuf },
}

#[derive(Args)]
struct FitArgs {
    data: PathBuf,
    config: PathBuf,
    #[arg(short, long, default_value = "fit.json")]
    out: PathBuf,
}

#[derive(Deserialize)]
struct ConfigFile {
    #[serde(default)]
    fit: Option<FitSection>,
    #[serde(default)]
    simulate: Option<SimulateSection>,
    /// One replication job or a list of them; a list emits one combined
    /// table, one row per (scenario, estimator).
    #[serde(default)]
    replicate: Option<OneOrMany<ReplicateSection>>,
    #[serde(default)]
    sweep: Option<SweepSection>,
    #[serde(default)]
    oracle: Option<OracleSection>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Deserialize)]
struct FitSection {
    schema: Schema,
    model: ModelSpec,
    plan: WeightPlan,
    policy: ReferencePolicy,
    estimator: EstimatorKind,
    #[serde(default = "default_true")]
    adjust: bool,
    #[serde(default = "default_level")]
    level: f64,
}

#[derive(Deserialize)]
struct SimulateSection {
    scenario: ScenarioConfig,
}

#[derive(Deserialize)]
struct ReplicateSection {
    scenario: ScenarioConfig,
    n_reps: usize,
    estimators: Vec<EstimatorKind>,
    #[serde(default = "default_policy")]
    policy: ReferencePolicy,
    #[serde(default = "default_true")]
    adjust: bool,
    #[serde(default = "default_level")]
    level: f64,
    #[serde(default)]
    plan: Option<WeightPlan>,
}

#[derive(Deserialize)]
struct SweepSection {
    scenario: ScenarioConfig,
    axis: SweepAxis,
    grid: Vec<f64>,
    n_reps: usize,
    estimators: Vec<EstimatorKind>,
    #[serde(default = "default_policy")]
    policy: ReferencePolicy,
    #[serde(default = "default_true")]
    adjust: bool,
    #[serde(default = "default_level")]
    level: f64,
    #[serde(default)]
    plan: Option<WeightPlan>,
}

#[derive(Deserialize)]
struct OracleSection {
    scenario: ScenarioConfig,
    estimand: Estimand,
    #[serde(default = "default_policy")]
    policy: ReferencePolicy,
    #[serde(default = "default_n_mc")]
    n_mc: usize,
}

fn default_true() -> bool {
    true
}
fn default_level() -> f64 {
    0.95
}
fn default_policy() -> ReferencePolicy {
    ReferencePolicy::Observed
}
fn default_n_mc() -> usize {
    100_000
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }
}

fn estimate_error_code(err: &EstimateError) -> u8 {
    match err {
        EstimateError::Singular(_) | EstimateError::Adjustment(_) => EXIT_SINGULAR,
        EstimateError::InvalidData(_)
        | EstimateError::InsufficientClusters(_)
        | EstimateError::InsufficientPairs(_)
        | EstimateError::NegativeWeight { .. }
        | EstimateError::NoRows => EXIT_VALIDATION,
        EstimateError::Design(_)
        | EstimateError::Inference(_)
        | EstimateError::Domain(_) => EXIT_CONFIG,
    }
}

fn load_config(path: &PathBuf) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("cannot parse config {}: {e}", path.display())))
}

fn section<T>(section: Option<T>, name: &str) -> Result<T, CliError> {
    section.ok_or_else(|| CliError::config(format!("config has no `{name}` section")))
}

fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let section = section(config.fit, "fit")?;
    let ds = load_csv(&args.data, &section.schema)
        .map_err(|e| CliError { code: EXIT_VALIDATION, message: e.to_string() })?;
    let opts = FitOptions { adjust: section.adjust };
    let fitted = fit(&ds, &section.model, &section.plan, &section.policy, section.estimator, &opts)
        .map_err(|e| CliError { code: estimate_error_code(&e), message: e.to_string() })?;

    let json = serde_json::to_string_pretty(&fitted.to_json())
        .expect("fit result serializes");
    std::fs::write(&args.out, json)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", args.out.display())))?;

    println!(
        "{} fit: {} unit(s), {} row(s), dof {}",
        fitted.kind, fitted.n_units, fitted.n_rows_used, fitted.dof
    );
    println!(
        "{:<24} {:>12} {:>12} {:>9} {:>9} {:>12} {:>12}",
        "coefficient", "estimate", "se", "t", "p", "ci_lower", "ci_upper"
    );
    for (i, name) in fitted.columns.iter().take(fitted.p).enumerate() {
        println!("{:<24} {:>12.6} {:>12} {:>9} {:>9} {:>12} {:>12}", name, fitted.alpha[i], "-", "-", "-", "-", "-");
    }
    let cis = inference(&fitted, section.level)
        .map_err(|e| CliError { code: estimate_error_code(&e), message: e.to_string() })?;
    for ci in &cis {
        println!(
            "{:<24} {:>12.6} {:>12.6} {:>9.3} {:>9.4} {:>12.6} {:>12.6}",
            ci.name, ci.estimate, ci.se, ci.t_stat, ci.p_value, ci.ci_lower, ci.ci_upper
        );
    }
    Ok(())
}

fn cmd_simulate(config_path: &PathBuf, out: &PathBuf) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let section = section(config.simulate, "simulate")?;
    let ds = generate(&section.scenario)
        .map_err(|e| CliError { code: EXIT_RUN, message: e.to_string() })?;
    write_csv(&ds, out).map_err(|e| CliError {
        code: EXIT_VALIDATION,
        message: format!("cannot write {}: {e}", out.display()),
    })?;
    eprintln!("wrote {} rows to {}", ds.n_rows(), out.display());
    Ok(())
}

fn cmd_replicate(config_path: &PathBuf, out: &PathBuf) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let jobs = section(config.replicate, "replicate")?.into_vec();
    if jobs.is_empty() {
        return Err(CliError::config("replicate job list is empty"));
    }
    let mut reports = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let mut settings =
            RunSettings::new(job.n_reps, job.estimators.clone(), job.policy.clone());
        settings.adjust = job.adjust;
        settings.level = job.level;
        settings.plan = job.plan.clone();
        let report = run(&job.scenario, &settings)
            .map_err(|e| CliError { code: EXIT_RUN, message: e.to_string() })?;
        eprintln!("replicate wall time: {:.1}s", report.wall_time.as_secs_f64());
        reports.push(report);
    }
    print!("{}", reports_to_text(&reports));
    std::fs::write(out, reports_to_csv(&reports))
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", out.display())))?;
    Ok(())
}

fn cmd_sweep(config_path: &PathBuf, out: &PathBuf) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let section = section(config.sweep, "sweep")?;
    let mut settings =
        RunSettings::new(section.n_reps, section.estimators.clone(), section.policy.clone());
    settings.adjust = section.adjust;
    settings.level = section.level;
    settings.plan = section.plan.clone();
    let points = sweep(&section.scenario, section.axis, &section.grid, &settings)
        .map_err(|e| CliError { code: EXIT_RUN, message: e.to_string() })?;
    let csv = sweep_to_csv(&points);
    print!("{csv}");
    std::fs::write(out, csv)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", out.display())))?;
    Ok(())
}

fn cmd_oracle(config_path: &PathBuf) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let section = section(config.oracle, "oracle")?;
    let spec = TruthSpec { estimand: section.estimand, policy: section.policy.clone() };
    let (oracle, mc_se) = oracle_effect(&section.scenario, &spec, section.n_mc)
        .map_err(|e| CliError { code: EXIT_RUN, message: e.to_string() })?;
    match true_effect(&section.scenario, &spec) {
        Ok(truth) => {
            let gap = (oracle - truth.intercept).abs();
            println!(
                "oracle {oracle:.6} (mc_se {mc_se:.6}), analytic {:.6}, |gap| {gap:.6} = {:.2} mc_se",
                truth.intercept,
                gap / mc_se
            );
        }
        Err(_) => {
            println!("oracle {oracle:.6} (mc_se {mc_se:.6}); no analytic truth for this config");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = std::env::var("EXCURSION_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(cli.threads);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot configure thread pool: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }

    let outcome = match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate { config, out } => cmd_simulate(config, out),
        Command::Replicate { config, out } => cmd_replicate(config, out),
        Command::Sweep { config, out } => cmd_sweep(config, out),
        Command::Oracle { config } => cmd_oracle(config),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
