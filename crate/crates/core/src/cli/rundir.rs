//! Run-directory layout and its readers.
//!
//! ```text
//! <run>/config.toml            resolved configuration
//! <run>/manifest.json          RunManifest
//! <run>/run_record.json        RunRecord
//! <run>/telemetry.jsonl        GeometryRecord stream
//! <run>/events.jsonl           TrainEvent stream
//! <run>/updates.jsonl          flattened per-step update samples
//! <run>/stats.jsonl            final rank-space covariances
//! <run>/losses.csv             step,task_loss,total_loss
//! <run>/checkpoint_init.json
//! <run>/checkpoint_final.json
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GritError, Result};
use crate::kfac::StatsSnapshot;
use crate::telemetry::{read_jsonl, GeometryRecord, JsonlWriter, TELEMETRY_SCHEMA};
use crate::trainer::config::{GritConfig, Mode};
use crate::trainer::run::{RunOutput, UpdateSample};
use crate::trainer::{RunRecord, TrainEvent};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORD_FILE: &str = "run_record.json";
pub const TELEMETRY_FILE: &str = "telemetry.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const UPDATES_FILE: &str = "updates.jsonl";
pub const STATS_FILE: &str = "stats.jsonl";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CHECKPOINT_INIT_FILE: &str = "checkpoint_init.json";
pub const CHECKPOINT_FINAL_FILE: &str = "checkpoint_final.json";

pub const EVENTS_SCHEMA: &str = "grit-events";
pub const UPDATES_SCHEMA: &str = "grit-updates";
pub const STATS_SCHEMA: &str = "grit-stats";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub task: String,
    pub mode: Mode,
    /// RFC 3339, UTC.
    pub created_at: String,
    pub status: RunStatus,
    pub elapsed_seconds: Option<f64>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn start(config: &GritConfig) -> Self {
        let config_hash = config.config_hash();
        Self {
            run_id: run_id(&config_hash),
            config_hash,
            seed: config.seed,
            task: config.task.clone(),
            mode: config.mode,
            created_at: humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string(),
            status: RunStatus::Running,
            elapsed_seconds: None,
            error: None,
        }
    }
}

/// Identical configurations share an id.
pub fn run_id(config_hash: &str) -> String {
    config_hash.chars().take(16).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| missing(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn missing(path: &Path, e: std::io::Error) -> GritError {
    GritError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_stream<T: Serialize>(path: &Path, schema: &str, items: &[T]) -> Result<()> {
    let mut w = JsonlWriter::new(BufWriter::new(File::create(path)?), schema)?;
    for item in items {
        w.append(item)?;
    }
    w.finish()?;
    Ok(())
}

fn read_stream<T: for<'de> Deserialize<'de>>(path: &Path, schema: &str) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| missing(path, e))?;
    read_jsonl(BufReader::new(file), schema)
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

pub fn write_config(dir: &Path, config: &GritConfig) -> Result<()> {
    fs::write(dir.join(CONFIG_FILE), config.to_toml_string())?;
    Ok(())
}

/// Writes every artifact of a finished run except the manifest.
pub fn write_outputs(dir: &Path, output: &RunOutput) -> Result<()> {
    write_json(&dir.join(RECORD_FILE), &output.record)?;
    write_stream(&dir.join(TELEMETRY_FILE), TELEMETRY_SCHEMA, &output.telemetry)?;
    write_stream(&dir.join(EVENTS_FILE), EVENTS_SCHEMA, &output.events)?;
    write_stream(&dir.join(UPDATES_FILE), UPDATES_SCHEMA, &output.updates)?;
    write_stream(&dir.join(STATS_FILE), STATS_SCHEMA, &output.stats)?;
    let mut losses = BufWriter::new(File::create(dir.join(LOSSES_FILE))?);
    writeln!(losses, "step,task_loss,total_loss")?;
    for row in &output.losses {
        writeln!(losses, "{},{},{}", row.step, row.task_loss, row.total_loss)?;
    }
    losses.flush()?;
    write_json(&dir.join(CHECKPOINT_INIT_FILE), &output.init_checkpoint)?;
    write_json(&dir.join(CHECKPOINT_FINAL_FILE), &output.final_checkpoint)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

pub fn read_record(dir: &Path) -> Result<RunRecord> {
    read_json(&dir.join(RECORD_FILE))
}

pub fn read_telemetry(dir: &Path) -> Result<Vec<GeometryRecord>> {
    read_stream(&dir.join(TELEMETRY_FILE), TELEMETRY_SCHEMA)
}

pub fn read_events(dir: &Path) -> Result<Vec<TrainEvent>> {
    read_stream(&dir.join(EVENTS_FILE), EVENTS_SCHEMA)
}

pub fn read_updates(dir: &Path) -> Result<Vec<UpdateSample>> {
    read_stream(&dir.join(UPDATES_FILE), UPDATES_SCHEMA)
}

pub fn read_stats(dir: &Path) -> Result<Vec<StatsSnapshot>> {
    read_stream(&dir.join(STATS_FILE), STATS_SCHEMA)
}

/// Fails unless the manifest says the run finished.
pub fn require_complete(dir: &Path) -> Result<RunManifest> {
    let manifest = read_manifest(dir)
        .map_err(|e| GritError::Validation(format!("{} is not a run directory: {e}", dir.display())))?;
    if manifest.status != RunStatus::Complete {
        return Err(GritError::Validation(format!(
            "run {} in {} is {:?}, not complete",
            manifest.run_id,
            dir.display(),
            manifest.status
        )));
    }
    Ok(manifest)
}

/// `$GRIT_RUNS_DIR`, else `./runs`.
pub fn default_runs_root() -> PathBuf {
    std::env::var_os(super::RUNS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
