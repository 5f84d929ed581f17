//! Built-in synthetic tasks.
//!
//! `synthetic_lowrank(d, r_true, noise)`: one linear `d -> d` layer with
//! frozen `W0 ~ N(0, 1/d)`. Fine-tuning inputs live near an `r_true`-dim
//! subspace, `x = V z + noise * e`, with targets `(W0 + U V^T) x + noise * xi`
//! so the optimal update has rank `r_true`.
//!
//! `two_task_forgetting(d, hidden, pretrain_steps)`: a `d -> hidden (tanh) -> d`
//! network is first trained for `pretrain_steps` full-batch Adam steps to
//! imitate a random teacher on isotropic inputs. Fine-tuning then adds a
//! planted rank-2 change `0.25 U V^T x` on inputs concentrated near span(V), with
//! noise 0.05 on inputs and labels.
//!
//! For both tasks the pretraining-proxy set is a held-out isotropic sample
//! labelled by the frozen base model itself, so `pt_loss` measures drift of
//! the adapted function away from the base function on the pretraining
//! distribution, and the base weights sit at an exact minimum of it.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GritError, Result};
use crate::linalg::{sym_eig, SymMatrix};
use crate::model::{mse_loss, Activation, BaseLayer, Model};
use crate::trainer::optimizer::AdamW;

/// Named random sub-streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Task = 1,
    Init = 2,
    Data = 3,
    Eval = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub const PT_SAMPLES: usize = 256;
pub const EVAL_SAMPLES: usize = 256;
const PRETRAIN_SAMPLES: usize = 512;
const PRETRAIN_LR: f64 = 1e-2;
const TWO_TASK_NOISE: f64 = 0.05;
const TWO_TASK_RANK: usize = 2;
const TWO_TASK_SCALE: f64 = 0.25;
/// Dense pretraining Hessians are only formed up to this many base weights.
pub const MAX_HESSIAN_PARAMS: usize = 2048;
const HESSIAN_FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    SyntheticLowrank { d: usize, r_true: usize, noise: f64 },
    TwoTaskForgetting { d: usize, hidden: usize, pretrain_steps: usize },
}

fn parse_args(body: &str, names: &[&str]) -> Result<Vec<String>> {
    let parts: Vec<&str> = body.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if parts.len() != names.len() {
        return Err(GritError::Config(format!(
            "task expects {} arguments ({}), got {}",
            names.len(),
            names.join(", "),
            parts.len()
        )));
    }
    let mut out = vec![String::new(); names.len()];
    for (i, part) in parts.iter().enumerate() {
        match part.split_once('=') {
            Some((k, v)) => {
                let k = k.trim().to_ascii_lowercase();
                let pos = names
                    .iter()
                    .position(|n| *n == k)
                    .ok_or_else(|| GritError::Config(format!("unknown task argument `{k}`")))?;
                out[pos] = v.trim().to_string();
            }
            None => out[i] = part.to_string(),
        }
    }
    if let Some(i) = out.iter().position(String::is_empty) {
        return Err(GritError::Config(format!("task argument `{}` missing", names[i])));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| GritError::Config(format!("task argument `{name}` has invalid value `{v}`")))
}

impl TaskSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let (name, body) = match text.split_once('(') {
            Some((n, rest)) => {
                let body = rest
                    .strip_suffix(')')
                    .ok_or_else(|| GritError::Config(format!("unbalanced parentheses in task `{text}`")))?;
                (n.trim(), body)
            }
            None => (text, ""),
        };
        let spec = match name {
            "synthetic_lowrank" => {
                let a = parse_args(body, &["d", "r_true", "noise"])?;
                TaskSpec::SyntheticLowrank {
                    d: num("d", &a[0])?,
                    r_true: num("r_true", &a[1])?,
                    noise: num("noise", &a[2])?,
                }
            }
            "two_task_forgetting" => {
                let a = parse_args(body, &["d", "hidden", "pretrain_steps"])?;
                TaskSpec::TwoTaskForgetting {
                    d: num("d", &a[0])?,
                    hidden: num("hidden", &a[1])?,
                    pretrain_steps: num("pretrain_steps", &a[2])?,
                }
            }
            other => return Err(GritError::Config(format!("unknown task `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::SyntheticLowrank { d, r_true, noise } => {
                if d == 0 || r_true == 0 || r_true > d {
                    return Err(GritError::Config(format!("synthetic_lowrank needs 1 <= r_true <= d, got d = {d}, r_true = {r_true}")));
                }
                if !(noise >= 0.0 && noise.is_finite()) {
                    return Err(GritError::Config(format!("noise must be non-negative, got {noise}")));
                }
            }
            TaskSpec::TwoTaskForgetting { d, hidden, .. } => {
                if d < TWO_TASK_RANK || hidden == 0 {
                    return Err(GritError::Config(format!(
                        "two_task_forgetting needs d >= {TWO_TASK_RANK} and hidden >= 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest adapter rank every layer of the task admits.
    pub fn max_rank(&self) -> usize {
        match *self {
            TaskSpec::SyntheticLowrank { d, .. } => d,
            TaskSpec::TwoTaskForgetting { d, hidden, .. } => d.min(hidden),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::SyntheticLowrank { .. } => "synthetic_lowrank",
            TaskSpec::TwoTaskForgetting { .. } => "two_task_forgetting",
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// `cols` orthonormal columns spanning a random subspace of R^n.
fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize, cols: usize) -> Result<Array2<f64>> {
    let g = gaussian(rng, n, n, 1.0);
    let d = sym_eig(&SymMatrix::new(g.dot(&g.t()))?)?;
    Ok(d.top_vectors(cols))
}

/// An instantiated task: frozen base layers, data generators and the
/// pretraining-proxy evaluation set.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: TaskSpec,
    bases: Vec<BaseLayer>,
    input_basis: Array2<f64>,
    planted: Array2<f64>,
    noise: f64,
    pt_x: Array2<f64>,
    pt_y: Array2<f64>,
}

impl Task {
    pub fn build(spec: &TaskSpec, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Task);
        let (bases, d, rank, noise) = match *spec {
            TaskSpec::SyntheticLowrank { d, r_true, noise } => {
                let w0 = gaussian(&mut rng, d, d, 1.0 / (d as f64).sqrt());
                (vec![BaseLayer::new(w0, None, Activation::Identity)?], d, r_true, noise)
            }
            TaskSpec::TwoTaskForgetting { d, hidden, pretrain_steps } => {
                let bases = pretrain_two_layer(&mut rng, d, hidden, pretrain_steps)?;
                (bases, d, TWO_TASK_RANK, TWO_TASK_NOISE)
            }
        };
        let v = random_orthonormal(&mut rng, d, rank)?;
        let u = random_orthonormal(&mut rng, d, rank)?;
        let scale = match spec {
            TaskSpec::SyntheticLowrank { .. } => 1.0,
            TaskSpec::TwoTaskForgetting { .. } => TWO_TASK_SCALE,
        };
        let planted = u.dot(&v.t()) * scale;
        let pt_x = gaussian(&mut rng, PT_SAMPLES, d, 1.0);
        let pt_y = forward_bases(&bases, &pt_x)?;
        Ok(Self {
            spec: spec.clone(),
            bases,
            input_basis: v,
            planted,
            noise,
            pt_x,
            pt_y,
        })
    }

    pub fn bases(&self) -> &[BaseLayer] {
        &self.bases
    }

    pub fn d_in(&self) -> usize {
        self.bases[0].d_in()
    }

    pub fn base_param_count(&self) -> usize {
        self.bases.iter().map(|b| b.d_in() * b.d_out()).sum()
    }

    /// Planted output-space change `U V^T` of the fine-tuning target.
    pub fn planted_update(&self) -> &Array2<f64> {
        &self.planted
    }

    /// Fresh fine-tuning minibatch.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, batch: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        let d = self.d_in();
        let z = gaussian(rng, batch, self.input_basis.ncols(), 1.0);
        let x = z.dot(&self.input_basis.t()) + gaussian(rng, batch, d, self.noise);
        let clean = forward_bases(&self.bases, &x)? + x.dot(&self.planted.t());
        let y = clean + gaussian(rng, batch, d, self.noise);
        Ok((x, y))
    }

    /// Fixed fine-tuning evaluation set.
    pub fn eval_set(&self, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
        self.sample_batch(&mut stream_rng(seed, Stream::Eval), EVAL_SAMPLES)
    }

    pub fn pt_set(&self) -> (&Array2<f64>, &Array2<f64>) {
        (&self.pt_x, &self.pt_y)
    }

    pub fn pt_loss(&self, model: &Model) -> Result<f64> {
        Ok(mse_loss(&model.predict(&self.pt_x)?, &self.pt_y).0)
    }

    /// Gradient of the pretraining-proxy loss with respect to all base
    /// weights (row-major per layer, layers concatenated).
    fn pt_weight_gradient(&self, model: &mut Model) -> Result<Array1<f64>> {
        let pred = model.forward(&self.pt_x)?;
        let (_, grad) = mse_loss(&pred, &self.pt_y);
        let tapes = model.backward(&grad)?;
        Ok(tapes.iter().flat_map(|t| t.grad_w().into_iter()).collect())
    }

    /// Dense Hessian of the pretraining-proxy loss at the frozen base
    /// weights, by central differences of exact gradients, symmetrized.
    /// `None` above [`MAX_HESSIAN_PARAMS`].
    pub fn pt_hessian(&self) -> Result<Option<SymMatrix>> {
        let p = self.base_param_count();
        if p > MAX_HESSIAN_PARAMS {
            return Ok(None);
        }
        let probe = Model::from_layers(
            self.bases
                .iter()
                .map(|b| crate::model::AdaptedLayer {
                    base: b.clone(),
                    adapter: crate::model::AdapterPair {
                        a: Array2::zeros((1, b.d_in())),
                        b: Array2::zeros((b.d_out(), 1)),
                        scaling: 0.0,
                    },
                })
                .collect(),
        )?;
        let base_w = probe.base_weights();
        let flat: Vec<f64> = base_w.iter().flat_map(|w| w.iter().copied()).collect();
        let unflatten = |v: &[f64]| -> Vec<Array2<f64>> {
            let mut off = 0;
            base_w
                .iter()
                .map(|w| {
                    let n = w.len();
                    let m = Array2::from_shape_vec(w.dim(), v[off..off + n].to_vec()).expect("sized");
                    off += n;
                    m
                })
                .collect()
        };
        let mut h = Array2::<f64>::zeros((p, p));
        let mut buf = flat.clone();
        for i in 0..p {
            buf[i] = flat[i] + HESSIAN_FD_STEP;
            let gp = self.pt_weight_gradient(&mut probe.with_base_weights(&unflatten(&buf))?)?;
            buf[i] = flat[i] - HESSIAN_FD_STEP;
            let gm = self.pt_weight_gradient(&mut probe.with_base_weights(&unflatten(&buf))?)?;
            buf[i] = flat[i];
            h.column_mut(i).assign(&((gp - gm) / (2.0 * HESSIAN_FD_STEP)));
        }
        Ok(Some(SymMatrix::named("pt_hessian", h)?))
    }

    /// Diagonal blocks of a full Hessian, one per layer.
    pub fn hessian_blocks(&self, h: &SymMatrix) -> Result<Vec<SymMatrix>> {
        let mut off = 0;
        let mut out = Vec::new();
        for b in &self.bases {
            let n = b.d_in() * b.d_out();
            let block = h.as_array().slice(ndarray::s![off..off + n, off..off + n]).to_owned();
            out.push(SymMatrix::named("pt_hessian_block", block)?);
            off += n;
        }
        Ok(out)
    }
}

fn forward_bases(bases: &[BaseLayer], x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut h = x.clone();
    for b in bases {
        if h.ncols() != b.d_in() {
            return Err(GritError::shape("base layer input mismatch"));
        }
        let mut z = h.dot(&b.w0().t());
        if let Some(bias) = b.bias() {
            z += bias;
        }
        h = b.activation.apply(&z);
    }
    Ok(h)
}

fn pretrain_two_layer(rng: &mut ChaCha8Rng, d: usize, hidden: usize, steps: usize) -> Result<Vec<BaseLayer>> {
    let teacher = [
        BaseLayer::new(gaussian(rng, hidden, d, 1.5 / (d as f64).sqrt()), None, Activation::Tanh)?,
        BaseLayer::new(gaussian(rng, d, hidden, 1.0 / (hidden as f64).sqrt()), None, Activation::Identity)?,
    ];
    let x = gaussian(rng, PRETRAIN_SAMPLES, d, 1.0);
    let y = forward_bases(&teacher, &x)?;
    let student = vec![
        BaseLayer::new(gaussian(rng, hidden, d, 1.0 / (d as f64).sqrt()), None, Activation::Tanh)?,
        BaseLayer::new(gaussian(rng, d, hidden, 1.0 / (hidden as f64).sqrt()), None, Activation::Identity)?,
    ];
    let mut model = Model::from_layers(
        student
            .into_iter()
            .map(|b| {
                let (di, dout) = (b.d_in(), b.d_out());
                crate::model::AdaptedLayer {
                    base: b,
                    adapter: crate::model::AdapterPair {
                        a: Array2::zeros((1, di)),
                        b: Array2::zeros((dout, 1)),
                        scaling: 0.0,
                    },
                }
            })
            .collect(),
    )?;
    let shapes: Vec<(usize, usize)> = model.base_weights().iter().map(|w| w.dim()).collect();
    let mut opt = AdamW::new(PRETRAIN_LR, &shapes);
    for _ in 0..steps {
        let pred = model.forward(&x)?;
        let (_, grad) = mse_loss(&pred, &y);
        let tapes = model.backward(&grad)?;
        let grads: Vec<Array2<f64>> = tapes.iter().map(|t| t.grad_w()).collect();
        let mut weights = model.base_weights();
        {
            let mut refs: Vec<&mut Array2<f64>> = weights.iter_mut().collect();
            opt.step(&mut refs, &grads);
        }
        model = model.with_base_weights(&weights)?;
    }
    Ok(model.layers().iter().map(|l| l.base.clone()).collect())
}
