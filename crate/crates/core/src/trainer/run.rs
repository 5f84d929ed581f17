//! End-to-end experiment driver.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::forgetting::{quadratic_forgetting, Geometry, LawSample};
use crate::kfac::StatsSnapshot;
use crate::linalg::{sym_eig, SpectralDecomp, SymMatrix};
use crate::model::{mse_loss, Checkpoint, Model};
use crate::telemetry::{GeometryRecord, RecordContext};
use crate::trainer::config::{GritConfig, Mode};
use crate::trainer::tasks::{stream_rng, Stream, Task, TaskSpec};
use crate::trainer::{TrainEvent, Trainer};

/// Full Hessians are eigendecomposed for the quadratic estimate up to this size.
const MAX_DECOMP_PARAMS: usize = 512;
/// Upper bound on stored update-cloud samples.
const MAX_UPDATE_SAMPLES: usize = 500;

/// Means over every emitted geometry record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySummary {
    pub records: usize,
    pub k_selected: f64,
    pub r_eff: f64,
    pub rho_align: f64,
    pub pi_proj: f64,
    pub tail_mass: f64,
    pub curvature_exposure: f64,
    pub jitter: f64,
    pub subspace_drift: f64,
    pub eig_cv: f64,
    pub cov_var: f64,
}

impl GeometrySummary {
    pub fn from_records(records: &[GeometryRecord]) -> Option<Self> {
        if records.is_empty() {
            return None;
        }
        let n = records.len() as f64;
        let mean = |f: &dyn Fn(&GeometryRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        Some(Self {
            records: records.len(),
            k_selected: mean(&|r| r.k_selected as f64),
            r_eff: mean(&|r| r.r_eff as f64),
            rho_align: mean(&|r| r.rho_align),
            pi_proj: mean(&|r| r.pi_proj),
            tail_mass: mean(&|r| r.tail_mass as f64),
            curvature_exposure: mean(&|r| r.curvature_exposure),
            jitter: mean(&|r| r.jitter),
            subspace_drift: mean(&|r| r.subspace_drift),
            eig_cv: mean(&|r| r.eig_cv),
            cov_var: mean(&|r| r.cov_var),
        })
    }
}

/// Summary of one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    /// Fine-tuning examples consumed.
    pub d_ft: f64,
    /// Frozen base parameter count.
    pub n_params: f64,
    pub trainable_params: usize,
    pub max_rank: usize,
    pub final_task_loss: f64,
    pub pt_loss_before: f64,
    pub pt_loss_after: f64,
    /// `1/2 dw^T H dw` over all layers' weight changes, when the Hessian is small enough.
    pub pt_loss_quadratic: Option<f64>,
    pub reprojection_events: usize,
    pub preconditioned_steps: usize,
    pub final_k: Vec<usize>,
    /// Sum over layers of the last record's curvature exposure.
    pub final_curvature_exposure: f64,
    pub geometry_summary: Option<GeometrySummary>,
}

impl RunRecord {
    pub fn law_sample(&self) -> LawSample {
        LawSample {
            d_ft: self.d_ft,
            n_params: self.n_params,
            pt_loss: self.pt_loss_after,
            geometry: self.geometry_summary.as_ref().map(|g| Geometry {
                r_eff: g.r_eff,
                rho_align: g.rho_align,
                pi_proj: g.pi_proj,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub task_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSample {
    pub step: usize,
    pub update: Vec<f64>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub telemetry: Vec<GeometryRecord>,
    pub events: Vec<TrainEvent>,
    pub losses: Vec<LossRow>,
    pub updates: Vec<UpdateSample>,
    pub stats: Vec<StatsSnapshot>,
    pub init_checkpoint: Checkpoint,
    pub final_checkpoint: Checkpoint,
}

/// Row-major `vec(W_final - W_init)` over all layers.
pub fn weight_change(before: &Model, after: &Model) -> Array1<f64> {
    before
        .layers()
        .iter()
        .zip(after.layers())
        .flat_map(|(b, a)| (a.effective_weight() - b.effective_weight()).into_iter())
        .collect()
}

/// Instantiates the task, trains for `config.steps` and collects telemetry.
pub fn run_experiment(config: &GritConfig) -> Result<RunOutput> {
    config.validate()?;
    let spec = TaskSpec::parse(&config.task)?;
    let task = Task::build(&spec, config.seed)?;
    let mut init_rng = stream_rng(config.seed, Stream::Init);
    let model = Model::new(task.bases().to_vec(), config.lora_rank, config.scaling(), &mut init_rng)?;
    let initial = model.clone();
    let pt_loss_before = task.pt_loss(&model)?;

    let hessian = task.pt_hessian()?;
    let blocks = match &hessian {
        Some(h) => Some(task.hessian_blocks(h)?),
        None => None,
    };

    let mut trainer = Trainer::new(config.clone(), model)?;
    let mut data_rng = stream_rng(config.seed, Stream::Data);
    let mut telemetry = Vec::new();
    let mut events = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    let mut updates = Vec::new();
    let update_every = config.steps.div_ceil(MAX_UPDATE_SAMPLES).max(1);
    let n_layers = trainer.model().num_layers();
    let mut thresholds: Vec<Option<f64>> = vec![config.tail_threshold; n_layers];

    for step in 0..config.steps {
        let (x, y) = task.sample_batch(&mut data_rng, config.batch_size).map_err(|e| e.at_step(step))?;
        let report = trainer.train_step(&x, &y)?;
        losses.push(LossRow {
            step,
            task_loss: report.task_loss,
            total_loss: report.total_loss,
        });
        let reprojected: Vec<bool> = (0..n_layers)
            .map(|l| {
                report
                    .events
                    .iter()
                    .any(|e| matches!(e, TrainEvent::Reprojection(ev) if ev.layer == l))
            })
            .collect();
        events.extend(report.events);

        if step % update_every == 0 {
            let update: Vec<f64> = trainer
                .layer_states()
                .iter()
                .flat_map(|s| s.tracker.last_update().unwrap_or(&[]).iter().copied())
                .collect();
            updates.push(UpdateSample { step, update });
        }

        let record_now = step % config.reprojection_freq == 0 || step + 1 == config.steps;
        if record_now {
            for l in 0..n_layers {
                let rec = record_layer(&mut trainer, config, step, l, &mut thresholds[l], blocks.as_deref())
                    .map_err(|e| e.at_step(step))?;
                telemetry.push(rec);
            }
        }
        for (l, &fired) in reprojected.iter().enumerate() {
            if fired {
                trainer.layer_state_mut(l).tracker.reset_update_window();
            }
        }
    }

    let final_model = trainer.model().clone();
    let pt_loss_after = task.pt_loss(&final_model)?;
    let (ex, ey) = task.eval_set(config.seed)?;
    let final_task_loss = mse_loss(&final_model.predict(&ex)?, &ey).0;
    let pt_loss_quadratic = match &hessian {
        Some(h) if h.dim() <= MAX_DECOMP_PARAMS => {
            let decomp: SpectralDecomp = sym_eig(h)?;
            Some(quadratic_forgetting(&decomp, &weight_change(&initial, &final_model))?)
        }
        _ => None,
    };
    let last_step = telemetry.last().map(|r| r.step);
    let final_curvature_exposure = telemetry
        .iter()
        .filter(|r| Some(r.step) == last_step)
        .map(|r| r.curvature_exposure)
        .sum();
    let r = config.lora_rank;
    let record = RunRecord {
        task: config.task.clone(),
        mode: config.mode,
        seed: config.seed,
        config_hash: config.config_hash(),
        steps: config.steps,
        d_ft: (config.steps * config.batch_size) as f64,
        n_params: final_model.base_param_count() as f64,
        trainable_params: final_model.trainable_param_count(),
        max_rank: r,
        final_task_loss,
        pt_loss_before,
        pt_loss_after,
        pt_loss_quadratic,
        reprojection_events: events
            .iter()
            .filter(|e| matches!(e, TrainEvent::Reprojection(_)))
            .count(),
        preconditioned_steps: trainer.preconditioned_steps(),
        final_k: trainer
            .layer_states()
            .iter()
            .map(|s| s.current_k.unwrap_or(r))
            .collect(),
        final_curvature_exposure,
        geometry_summary: GeometrySummary::from_records(&telemetry),
    };
    let stats = trainer
        .layer_states()
        .iter()
        .enumerate()
        .map(|(l, s)| s.stats.snapshot(config.steps, l))
        .collect();
    Ok(RunOutput {
        record,
        telemetry,
        events,
        losses,
        updates,
        stats,
        init_checkpoint: Checkpoint::capture(&initial, config.seed, 0),
        final_checkpoint: Checkpoint::capture(&final_model, config.seed, config.steps),
    })
}

fn record_layer(
    trainer: &mut Trainer,
    config: &GritConfig,
    step: usize,
    layer: usize,
    threshold: &mut Option<f64>,
    blocks: Option<&[SymMatrix]>,
) -> Result<GeometryRecord> {
    let r = config.lora_rank;
    let adapter = trainer.model().adapter(layer).clone();
    let delta_w = adapter.delta_w();
    if threshold.is_none() && delta_w.iter().any(|v| *v != 0.0) {
        let mut mags: Vec<f64> = delta_w.iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let mid = mags.len() / 2;
        let median = if mags.len() % 2 == 0 {
            0.5 * (mags[mid - 1] + mags[mid])
        } else {
            mags[mid]
        };
        *threshold = Some(3.0 * median);
    }
    let state = trainer.layer_state_mut(layer);
    let a_decomp = state.stats.a_decomp()?;
    let trust_g = config.use_two_sided
        && state.stats.inv_ready()
        && state.stats.n_cov() >= config.g_gate_min_samples;
    let fisher = if trust_g {
        state.stats.g_decomp()?.eigenvectors
    } else {
        a_decomp.eigenvectors.clone()
    };
    let fisher: Array2<f64> = fisher.slice(s![.., ..r]).to_owned();
    let k_selected = state.current_k.unwrap_or(r);
    state.tracker.record(RecordContext {
        step,
        layer,
        k_selected,
        eta: config.effective_rank_eta,
        tail_threshold: threshold.unwrap_or(f64::INFINITY),
        adapter: &adapter,
        a_spectrum: a_decomp.eigenvalues.to_vec(),
        fisher_vectors: &fisher,
        hessian_block: blocks.map(|b| &b[layer]),
    })
}
