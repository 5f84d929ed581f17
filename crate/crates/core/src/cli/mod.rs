//! Command-line surface: `train`, `audit`, `fit-law` and `oracle`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 validation failure,
//! 3 underdetermined fit.

pub mod audit;
pub mod oracle;
pub mod rundir;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::GritError;
use crate::forgetting::{fit_baseline_law, fit_xi_coefficients, predict, ScalingFit, GAMMA_NAMES};
use crate::trainer::{run_experiment, GritConfig, RunRecord};
use audit::AuditSummary;
use rundir::{RunManifest, RunStatus};

/// Relocates the default output root for `train`.
pub const RUNS_DIR_ENV: &str = "GRIT_RUNS_DIR";

#[derive(Debug, Parser)]
#[command(name = "grit", version, about = "Geometry-aware low-rank adaptation experiments")]
pub struct Cli {
    /// Override the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Run directory for `train`, report directory for `audit`, output file for `fit-law`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write a run directory.
    Train { config: PathBuf },
    /// Write CSV geometry reports for a finished run.
    Audit { run_dir: PathBuf },
    /// Fit the forgetting law across finished runs.
    FitLaw {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
    /// Run a brute-force oracle suite.
    Oracle { suite: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Runtime = 1,
    Validation = 2,
    Underdetermined = 3,
}

impl ExitStatus {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug)]
pub struct CliError {
    pub status: ExitStatus,
    pub message: String,
}

impl CliError {
    fn runtime(e: impl fmt::Display) -> Self {
        Self {
            status: ExitStatus::Runtime,
            message: e.to_string(),
        }
    }

    fn validation(e: impl fmt::Display) -> Self {
        Self {
            status: ExitStatus::Validation,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Parses the config, applies the seed override and validates.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<GritConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = GritConfig::from_toml_str(&text).map_err(CliError::validation)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

/// Trains `config` into `out_dir` (default `<runs root>/<run_id>`) and returns the run directory.
pub fn cmd_train(config: &GritConfig, out_dir: Option<&Path>) -> Result<PathBuf, CliError> {
    config.validate().map_err(CliError::validation)?;
    let mut manifest = RunManifest::start(config);
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => rundir::default_runs_root().join(&manifest.run_id),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    rundir::write_config(&dir, config).map_err(CliError::runtime)?;
    rundir::write_manifest(&dir, &manifest).map_err(CliError::runtime)?;

    let started = Instant::now();
    let result = run_experiment(config).and_then(|out| rundir::write_outputs(&dir, &out));
    manifest.elapsed_seconds = Some(started.elapsed().as_secs_f64());
    match result {
        Ok(()) => {
            manifest.status = RunStatus::Complete;
            rundir::write_manifest(&dir, &manifest).map_err(CliError::runtime)?;
            Ok(dir)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            rundir::write_manifest(&dir, &manifest).map_err(CliError::runtime)?;
            Err(CliError::runtime(format!("run {} failed: {e}", manifest.run_id)))
        }
    }
}

/// Writes the audit CSVs into `out_dir` (default `<run_dir>/audit`).
pub fn cmd_audit(run_dir: &Path, out_dir: Option<&Path>) -> Result<AuditSummary, CliError> {
    let out = out_dir.map_or_else(|| run_dir.join("audit"), Path::to_path_buf);
    audit::audit_run(run_dir, &out).map_err(CliError::runtime)
}

/// One run's contribution to a law fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub run_dir: String,
    pub d_ft: f64,
    pub n_params: f64,
    pub pt_loss: f64,
    pub predicted: f64,
    pub residual: f64,
}

/// The `fit-law` output document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    #[serde(flatten)]
    pub fit: ScalingFit,
    pub runs: Vec<FitRow>,
}

/// Baseline law fit followed by the geometry-coefficient fit.
pub fn cmd_fit_law(run_dirs: &[PathBuf]) -> Result<FitDocument, CliError> {
    let mut records: Vec<RunRecord> = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        rundir::require_complete(dir).map_err(CliError::runtime)?;
        records.push(rundir::read_record(dir).map_err(CliError::runtime)?);
    }
    let samples: Vec<_> = records.iter().map(RunRecord::law_sample).collect();
    let classify = |e: GritError| match e {
        GritError::Underdetermined(_) => CliError {
            status: ExitStatus::Underdetermined,
            message: e.to_string(),
        },
        GritError::Validation(_) | GritError::Config(_) => CliError::validation(e),
        other => CliError::runtime(other),
    };
    let baseline = fit_baseline_law(&samples).map_err(classify)?;
    let fit = if samples.iter().any(|s| s.geometry.is_some()) {
        match fit_xi_coefficients(&samples, &baseline) {
            Ok(f) => f,
            Err(GritError::Unidentifiable(_)) => all_unidentifiable(baseline),
            Err(e) => return Err(classify(e)),
        }
    } else {
        all_unidentifiable(baseline)
    };
    let runs = run_dirs
        .iter()
        .zip(&samples)
        .map(|(dir, s)| {
            let predicted = predict(&fit, s.d_ft, s.n_params, s.geometry.as_ref());
            FitRow {
                run_dir: dir.display().to_string(),
                d_ft: s.d_ft,
                n_params: s.n_params,
                pt_loss: s.pt_loss,
                predicted,
                residual: s.pt_loss - predicted,
            }
        })
        .collect();
    Ok(FitDocument { fit, runs })
}

fn all_unidentifiable(mut fit: ScalingFit) -> ScalingFit {
    fit.gamma_r = 0.0;
    fit.gamma_a = 0.0;
    fit.gamma_p = 0.0;
    fit.unidentifiable = GAMMA_NAMES.iter().map(|s| s.to_string()).collect();
    fit
}

/// Runs one oracle suite; fails with exit 1 if any check misses its tolerance.
pub fn cmd_oracle(suite: &str, quiet: bool) -> Result<Vec<oracle::OracleCheck>, CliError> {
    let checks = oracle::run_suite(suite).map_err(|e| match e {
        GritError::Validation(_) => CliError::validation(e),
        other => CliError::runtime(other),
    })?;
    if !quiet {
        let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        println!("{:<width$}  {:>12}  {:>10}  status", "check", "observed", "tolerance");
        for c in &checks {
            let status = if c.passed() { "pass" } else { "FAIL" };
            println!("{:<width$}  {:>12.3e}  {:>10.1e}  {status}", c.name, c.observed, c.tolerance);
        }
    }
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} (observed {:e}, tolerance {:e})", c.name, c.observed, c.tolerance))
        .collect();
    if failed.is_empty() {
        Ok(checks)
    } else {
        Err(CliError::runtime(format!("oracle suite {suite} failed: {}", failed.join("; "))))
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { config } => {
            let config = load_config(config, cli.seed)?;
            let dir = cmd_train(&config, cli.out.as_deref())?;
            if !cli.quiet {
                let record = rundir::read_record(&dir).map_err(CliError::runtime)?;
                println!("run directory: {}", dir.display());
                println!(
                    "final task loss {:.6e}, pt loss {:.6e} -> {:.6e}, reprojections {}, final k {:?}",
                    record.final_task_loss,
                    record.pt_loss_before,
                    record.pt_loss_after,
                    record.reprojection_events,
                    record.final_k
                );
            }
        }
        Command::Audit { run_dir } => {
            let summary = cmd_audit(run_dir, cli.out.as_deref())?;
            if !cli.quiet {
                println!("run {}: {} telemetry records, {} reprojection events", summary.run_id, summary.records, summary.reprojection_events);
                for l in &summary.layers {
                    if l.k_min == l.k_max {
                        println!("layer {}: k constant at {}", l.layer, l.k_final);
                    } else {
                        println!("layer {}: k in [{}, {}], final {}", l.layer, l.k_min, l.k_max, l.k_final);
                    }
                }
            }
        }
        Command::FitLaw { run_dirs } => {
            let doc = cmd_fit_law(run_dirs)?;
            let json = serde_json::to_string_pretty(&doc).map_err(CliError::runtime)?;
            match &cli.out {
                Some(path) => {
                    fs::write(path, format!("{json}\n")).map_err(CliError::runtime)?;
                    if !cli.quiet {
                        println!("fit written to {} (residual rms {:e})", path.display(), doc.fit.residual_rms);
                    }
                }
                None => println!("{json}"),
            }
        }
        Command::Oracle { suite } => {
            cmd_oracle(suite, cli.quiet)?;
        }
    }
    Ok(())
}

/// Executes a parsed command line, printing any error to stderr.
pub fn run(cli: &Cli) -> ExitStatus {
    match dispatch(cli) {
        Ok(()) => ExitStatus::Success,
        Err(e) => {
            eprintln!("error: {e}");
            e.status
        }
    }
}
