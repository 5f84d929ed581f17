//! CSV reports derived from a finished run directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::cli::rundir;
use crate::error::Result;
use crate::reprojection::cumulative_energy;
use crate::telemetry::{pca_export, write_pca_csv, GeometryRecord, PcaEmbedding};
use crate::trainer::TrainEvent;

pub const SPECTRA_CSV: &str = "spectra.csv";
pub const CUMULATIVE_ENERGY_CSV: &str = "cumulative_energy.csv";
pub const R_EFF_CSV: &str = "r_eff.csv";
pub const ALIGNMENT_CSV: &str = "alignment.csv";
pub const TAIL_MASS_CSV: &str = "tail_mass.csv";
pub const STABILITY_CSV: &str = "stability.csv";
pub const PCA_CSV: &str = "pca_updates.csv";
pub const RANK_SUMMARY_CSV: &str = "rank_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRankSummary {
    pub layer: usize,
    pub reprojection_events: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub k_final: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub run_id: String,
    pub records: usize,
    pub reprojection_events: usize,
    pub layers: Vec<LayerRankSummary>,
    pub pca_written: bool,
}

fn csv<F>(dir: &Path, name: &str, header: &str, rows: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    let mut out = BufWriter::new(File::create(dir.join(name))?);
    writeln!(out, "{header}")?;
    rows(&mut out)?;
    out.flush()?;
    Ok(())
}

fn indexed_header(prefix: &str, n: usize) -> String {
    let mut h = String::from("step,layer");
    for i in 1..=n {
        h.push_str(&format!(",{prefix}{i}"));
    }
    h
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!(",{v}")).collect()
}

/// Reads `run_dir` and writes every report into `out_dir`.
pub fn audit_run(run_dir: &Path, out_dir: &Path) -> Result<AuditSummary> {
    let manifest = rundir::require_complete(run_dir)?;
    let record = rundir::read_record(run_dir)?;
    let telemetry = rundir::read_telemetry(run_dir)?;
    let events = rundir::read_events(run_dir)?;
    let updates = rundir::read_updates(run_dir)?;
    fs::create_dir_all(out_dir)?;

    let width = telemetry.iter().map(|r| r.spectrum.len()).max().unwrap_or(record.max_rank);
    csv(out_dir, SPECTRA_CSV, &indexed_header("lambda_", width), |w| {
        for r in &telemetry {
            writeln!(w, "{},{}{}", r.step, r.layer, join(&r.spectrum))?;
        }
        Ok(())
    })?;
    csv(out_dir, CUMULATIVE_ENERGY_CSV, &indexed_header("e_", width), |w| {
        for r in &telemetry {
            if let Some(e) = cumulative_energy(&r.spectrum) {
                writeln!(w, "{},{}{}", r.step, r.layer, join(&e))?;
            }
        }
        Ok(())
    })?;
    let rows = |w: &mut dyn Write, f: &dyn Fn(&GeometryRecord) -> String| -> std::io::Result<()> {
        for r in &telemetry {
            writeln!(w, "{},{},{}", r.step, r.layer, f(r))?;
        }
        Ok(())
    };
    csv(out_dir, R_EFF_CSV, "step,layer,k_selected,r_eff", |w| {
        rows(w, &|r| format!("{},{}", r.k_selected, r.r_eff))
    })?;
    csv(out_dir, ALIGNMENT_CSV, "step,layer,rho_align,pi_proj", |w| {
        rows(w, &|r| format!("{},{}", r.rho_align, r.pi_proj))
    })?;
    csv(out_dir, TAIL_MASS_CSV, "step,layer,tail_mass", |w| {
        rows(w, &|r| r.tail_mass.to_string())
    })?;
    csv(
        out_dir,
        STABILITY_CSV,
        "step,layer,curvature_exposure,jitter,subspace_drift,eig_cv,cov_var",
        |w| {
            rows(w, &|r| {
                format!(
                    "{},{},{},{},{}",
                    r.curvature_exposure, r.jitter, r.subspace_drift, r.eig_cv, r.cov_var
                )
            })
        },
    )?;

    let dim = updates.iter().map(|u| u.update.len()).max().unwrap_or(0);
    let cloud: Vec<Array1<f64>> = updates
        .iter()
        .filter(|u| dim > 0 && u.update.len() == dim)
        .map(|u| Array1::from(u.update.clone()))
        .collect();
    let embedding = if cloud.len() >= 3 { Some(pca_export(&cloud)?) } else { None };
    let empty = PcaEmbedding {
        coords: vec![],
        explained: [0.0; 2],
        degenerate: true,
    };
    write_pca_csv(
        BufWriter::new(File::create(out_dir.join(PCA_CSV))?),
        embedding.as_ref().unwrap_or(&empty),
    )?;

    let mut per_layer: BTreeMap<usize, LayerRankSummary> = BTreeMap::new();
    for (layer, &k_final) in record.final_k.iter().enumerate() {
        per_layer.insert(
            layer,
            LayerRankSummary {
                layer,
                reprojection_events: 0,
                k_min: k_final,
                k_max: k_final,
                k_final,
            },
        );
    }
    for r in &telemetry {
        if let Some(s) = per_layer.get_mut(&r.layer) {
            s.k_min = s.k_min.min(r.k_selected);
            s.k_max = s.k_max.max(r.k_selected);
        }
    }
    for e in &events {
        if let TrainEvent::Reprojection(ev) = e {
            if let Some(s) = per_layer.get_mut(&ev.layer) {
                s.reprojection_events += 1;
                s.k_min = s.k_min.min(ev.k);
                s.k_max = s.k_max.max(ev.k);
            }
        }
    }
    let layers: Vec<LayerRankSummary> = per_layer.into_values().collect();
    csv(out_dir, RANK_SUMMARY_CSV, "layer,reprojection_events,k_min,k_max,k_final", |w| {
        for s in &layers {
            writeln!(w, "{},{},{},{},{}", s.layer, s.reprojection_events, s.k_min, s.k_max, s.k_final)?;
        }
        Ok(())
    })?;

    Ok(AuditSummary {
        run_id: manifest.run_id,
        records: telemetry.len(),
        reprojection_events: layers.iter().map(|s| s.reprojection_events).sum(),
        layers,
        pca_written: embedding.is_some(),
    })
}
