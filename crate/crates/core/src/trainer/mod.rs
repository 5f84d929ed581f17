//! The training loop: K-FAC preconditioned AdamW on adapters, curvature and
//! reprojection regularizers, periodic reprojection, and a plain LoRA mode.

pub mod config;
pub mod optimizer;
pub mod run;
pub mod tasks;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GritError, Result};
use crate::kfac::{InverseStatus, RankSpaceStats};
use crate::model::{mse_loss, AdapterPair, LayerTape, Model};
use crate::reprojection::{
    reproject, Projector, ReprojectionEvent, ReprojectionGate, ReprojectionOutcome, ReprojectionPolicy,
};
use crate::telemetry::LayerGeometryTracker;

pub use config::{GritConfig, Mode};
pub use optimizer::{clip_global_norm, global_norm, AdamW};
pub use run::{run_experiment, GeometrySummary, RunOutput, RunRecord};
pub use tasks::{Task, TaskSpec};

/// Sum over layers of the batch mean of `(g^T dW x)^2 = (s g_r^T a_r)^2`,
/// with per-sample output gradients `g` taken from the tapes.
pub fn curvature_penalty(tapes: &[LayerTape], adapters: &[&AdapterPair]) -> Result<f64> {
    Ok(curvature_terms(tapes, adapters)?.0)
}

/// Penalty value and its gradients with the tape quantities held fixed.
fn curvature_terms(
    tapes: &[LayerTape],
    adapters: &[&AdapterPair],
) -> Result<(f64, Vec<(Array2<f64>, Array2<f64>)>)> {
    if tapes.len() != adapters.len() {
        return Err(GritError::shape("one tape per adapter required"));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(tapes.len());
    for (tape, ad) in tapes.iter().zip(adapters) {
        let n = tape.batch_size();
        if n == 0 {
            grads.push((Array2::zeros(ad.a.dim()), Array2::zeros(ad.b.dim())));
            continue;
        }
        let g = &tape.dy * n as f64;
        let a_r = tape.x.dot(&ad.a.t());
        let g_r = g.dot(&ad.b);
        let s = ad.scaling;
        let c: Array1<f64> = (&g_r * &a_r).sum_axis(Axis(1)) * s;
        total += c.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let w = (&c * (2.0 * s / n as f64)).insert_axis(Axis(1));
        let grad_b = g.t().dot(&(&a_r * &w));
        let grad_a = (&g_r * &w).t().dot(&tape.x);
        grads.push((grad_a, grad_b));
    }
    Ok((total, grads))
}

/// `||A - P_A A||_F^2 + ||B - B P_G||_F^2`.
pub fn reprojection_penalty(adapter: &AdapterPair, projector_a: &Projector, projector_b: &Projector) -> f64 {
    reprojection_terms(adapter, projector_a, projector_b).0
}

fn reprojection_terms(
    adapter: &AdapterPair,
    projector_a: &Projector,
    projector_b: &Projector,
) -> (f64, Array2<f64>, Array2<f64>) {
    let ra = &adapter.a - &projector_a.apply_left(&adapter.a);
    let rb = &adapter.b - &projector_b.apply_right(&adapter.b);
    let value = ra.iter().chain(rb.iter()).map(|v| v * v).sum();
    (value, ra * 2.0, rb * 2.0)
}

/// Structured log entry for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    InverseRefresh {
        step: usize,
        layer: usize,
        status: InverseStatusEntry,
    },
    PreconditioningStarted {
        step: usize,
    },
    ReprojectionSkipped {
        step: usize,
        layer: usize,
        gate: ReprojectionGate,
    },
    Reprojection(ReprojectionEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum InverseStatusEntry {
    GatePending { n_cov: usize, required: usize },
    Refreshed { multiplier_a: f64, multiplier_g: f64 },
}

impl From<InverseStatus> for InverseStatusEntry {
    fn from(s: InverseStatus) -> Self {
        match s {
            InverseStatus::GatePending { n_cov, required } => Self::GatePending { n_cov, required },
            InverseStatus::Refreshed { multiplier_a, multiplier_g } => Self::Refreshed {
                multiplier_a,
                multiplier_g,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub task_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub preconditioned: bool,
    pub events: Vec<TrainEvent>,
}

/// Per-layer mutable state beside the adapter itself.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub stats: RankSpaceStats,
    pub tracker: LayerGeometryTracker,
    pub current_k: Option<usize>,
    pub projectors: Option<(Projector, Projector)>,
}

pub struct Trainer {
    config: GritConfig,
    policy: ReprojectionPolicy,
    model: Model,
    layers: Vec<LayerState>,
    optimizer: AdamW,
    step: usize,
    preconditioning_started: bool,
    preconditioned_steps: usize,
}

impl Trainer {
    pub fn new(config: GritConfig, model: Model) -> Result<Self> {
        config.validate()?;
        let policy = config.reprojection_policy();
        let mut layers = Vec::with_capacity(model.num_layers());
        let mut shapes = Vec::new();
        for l in model.layers() {
            let r = l.adapter.rank();
            policy.validate(r)?;
            layers.push(LayerState {
                stats: RankSpaceStats::new(r, config.effective_damping(), config.ema_beta)?,
                tracker: LayerGeometryTracker::new(r, l.base.d_in(), l.base.d_out()),
                current_k: None,
                projectors: None,
            });
            shapes.push(l.adapter.a.dim());
            shapes.push(l.adapter.b.dim());
        }
        let optimizer = AdamW::new(config.learning_rate, &shapes);
        Ok(Self {
            config,
            policy,
            model,
            layers,
            optimizer,
            step: 0,
            preconditioning_started: false,
            preconditioned_steps: 0,
        })
    }

    pub fn config(&self) -> &GritConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn layer_states(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn layer_state_mut(&mut self, layer: usize) -> &mut LayerState {
        &mut self.layers[layer]
    }

    /// Index of the next step to run.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn preconditioned_steps(&self) -> usize {
        self.preconditioned_steps
    }

    fn grit(&self) -> bool {
        self.config.mode == Mode::Grit
    }

    fn regularizer_ramp(&self, step: usize) -> f64 {
        let w = self.config.reprojection_warmup_steps;
        if w == 0 {
            1.0
        } else {
            ((step + 1) as f64 / w as f64).min(1.0)
        }
    }

    /// One iteration of the training loop on minibatch `(x, y)`.
    pub fn train_step(&mut self, x: &Array2<f64>, y: &Array2<f64>) -> Result<StepReport> {
        let step = self.step;
        self.train_step_inner(x, y).map_err(|e| match e {
            GritError::NonFinite { .. } | GritError::AtStep { .. } => e,
            other => other.at_step(step),
        })
    }

    fn train_step_inner(&mut self, x: &Array2<f64>, y: &Array2<f64>) -> Result<StepReport> {
        let step = self.step;
        if x.nrows() == 0 {
            return Err(GritError::Validation("empty batch".into()));
        }
        let cfg = self.config.clone();
        let grit = self.grit();
        let mut events = Vec::new();

        let pred = self.model.forward(x)?;
        let (task_loss, loss_grad) = mse_loss(&pred, y);
        if !task_loss.is_finite() {
            return Err(GritError::NonFinite {
                step,
                detail: format!("task loss {task_loss}"),
            });
        }
        let tapes = self.model.backward(&loss_grad)?;
        let mut grads: Vec<(Array2<f64>, Array2<f64>)> =
            tapes.iter().map(|t| (t.grad_a.clone(), t.grad_b.clone())).collect();

        let mut total_loss = task_loss;
        let ramp = self.regularizer_ramp(step);
        if grit && cfg.lambda_k > 0.0 {
            let adapters: Vec<&AdapterPair> = self.model.layers().iter().map(|l| &l.adapter).collect();
            let (value, pen) = curvature_terms(&tapes, &adapters)?;
            let w = cfg.lambda_k * ramp;
            total_loss += w * value;
            for ((ga, gb), (pa, pb)) in grads.iter_mut().zip(pen) {
                ga.scaled_add(w, &pa);
                gb.scaled_add(w, &pb);
            }
        }
        if grit && cfg.lambda_r > 0.0 {
            let w = cfg.lambda_r * ramp;
            for (l, (ga, gb)) in grads.iter_mut().enumerate() {
                if let Some((pa, pb)) = &self.layers[l].projectors {
                    let (value, da, db) = reprojection_terms(&self.model.layers()[l].adapter, pa, pb);
                    total_loss += w * value;
                    ga.scaled_add(w, &da);
                    gb.scaled_add(w, &db);
                }
            }
        }
        if !total_loss.is_finite() {
            return Err(GritError::NonFinite {
                step,
                detail: format!("regularized loss {total_loss}"),
            });
        }

        if step >= cfg.ng_warmup_steps && step % cfg.kfac_update_freq == 0 {
            for (l, tape) in tapes.iter().enumerate() {
                let adapter = &self.model.layers()[l].adapter;
                let state = &mut self.layers[l];
                state.stats.accumulate(tape, adapter)?;
                state.tracker.observe_covariance(state.stats.a_cov());
                if grit {
                    let status = state.stats.refresh_inverses(cfg.kfac_min_samples)?;
                    events.push(TrainEvent::InverseRefresh {
                        step,
                        layer: l,
                        status: status.into(),
                    });
                }
            }
        }

        let mut preconditioned = false;
        if grit && step >= cfg.ng_warmup_steps {
            for (l, (ga, gb)) in grads.iter_mut().enumerate() {
                let stats = &mut self.layers[l].stats;
                if stats.inv_ready() {
                    let (na, nb) = stats.precondition(ga, gb)?;
                    *ga = na;
                    *gb = nb;
                    preconditioned = true;
                }
            }
        }
        if preconditioned {
            self.preconditioned_steps += 1;
            if !self.preconditioning_started {
                self.preconditioning_started = true;
                events.push(TrainEvent::PreconditioningStarted { step });
            }
        }

        let mut flat: Vec<Array2<f64>> = grads.into_iter().flat_map(|(a, b)| [a, b]).collect();
        let grad_norm = clip_global_norm(&mut flat, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(GritError::NonFinite {
                step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }

        let before: Vec<(Array2<f64>, Array2<f64>)> = self
            .model
            .layers()
            .iter()
            .map(|l| (l.adapter.a.clone(), l.adapter.b.clone()))
            .collect();
        {
            let mut params: Vec<&mut Array2<f64>> = self
                .model
                .adapters_mut()
                .flat_map(|AdapterPair { a, b, .. }| [a, b])
                .collect();
            self.optimizer.step(&mut params, &flat);
        }
        for (l, (a0, b0)) in before.iter().enumerate() {
            let ad = self.model.adapter(l);
            let (da, db) = (&ad.a - a0, &ad.b - b0);
            self.layers[l].tracker.observe_update(&da, &db);
        }

        if grit {
            for l in 0..self.model.num_layers() {
                let prev = self.layers[l].current_k;
                let outcome = {
                    let stats = &self.layers[l].stats;
                    reproject(self.model.adapter_mut(l), stats, &self.policy, step, l, prev)?
                };
                match outcome {
                    ReprojectionOutcome::Applied {
                        event,
                        projector_a,
                        projector_b,
                    } => {
                        let state = &mut self.layers[l];
                        state.current_k = Some(event.k);
                        state.projectors = Some((projector_a, projector_b));
                        events.push(TrainEvent::Reprojection(event));
                    }
                    ReprojectionOutcome::Skipped(gate) => {
                        if gate != ReprojectionGate::OffCadence {
                            events.push(TrainEvent::ReprojectionSkipped { step, layer: l, gate });
                        }
                    }
                }
            }
        }

        self.step += 1;
        Ok(StepReport {
            step,
            task_loss,
            total_loss,
            grad_norm,
            preconditioned,
            events,
        })
    }
}
