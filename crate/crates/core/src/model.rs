//! Stacks of linear layers carrying a frozen base weight and a LoRA adapter.
//!
//! Each layer computes `z = (W0 + scaling * B A) x + bias` followed by an
//! elementwise activation. Gradients are exact reverse-mode; the per-layer
//! [`LayerTape`] keeps the captured inputs `x` and pre-activation gradients
//! `dL/dz` that the rank-space statistics consume.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GritError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => z.clone(),
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
        }
    }

    /// Multiplies `upstream` by the activation derivative at `z`.
    fn backprop(self, z: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => upstream.clone(),
            Activation::Tanh => {
                let mut out = upstream.clone();
                out.zip_mut_with(z, |g, &zi| {
                    let t = zi.tanh();
                    *g *= 1.0 - t * t;
                });
                out
            }
            Activation::Relu => {
                let mut out = upstream.clone();
                out.zip_mut_with(z, |g, &zi| {
                    if zi <= 0.0 {
                        *g = 0.0;
                    }
                });
                out
            }
        }
    }
}

/// Frozen pretrained layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseLayer {
    w0: Array2<f64>,
    bias: Option<Array1<f64>>,
    pub activation: Activation,
}

impl BaseLayer {
    pub fn new(w0: Array2<f64>, bias: Option<Array1<f64>>, activation: Activation) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != w0.nrows() {
                return Err(GritError::shape(format!(
                    "bias length {} does not match d_out {}",
                    b.len(),
                    w0.nrows()
                )));
            }
        }
        Ok(Self {
            w0,
            bias,
            activation,
        })
    }

    pub fn w0(&self) -> &Array2<f64> {
        &self.w0
    }

    pub fn bias(&self) -> Option<&Array1<f64>> {
        self.bias.as_ref()
    }

    pub fn d_in(&self) -> usize {
        self.w0.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.nrows()
    }
}

/// LoRA factors: `a` is `r x d_in`, `b` is `d_out x r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub scaling: f64,
}

impl AdapterPair {
    /// `A ~ N(0, 1/d_in)`, `B = 0`, so the adapter starts as the zero update.
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        scaling: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(GritError::Bound(format!(
                "adapter rank {rank} must lie in [1, min(d_in={d_in}, d_out={d_out})]"
            )));
        }
        if !(scaling > 0.0) {
            return Err(GritError::Validation(format!(
                "adapter scaling must be positive, got {scaling}"
            )));
        }
        let normal = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).expect("valid std");
        let a = Array2::from_shape_simple_fn((rank, d_in), || normal.sample(rng));
        Ok(Self {
            a,
            b: Array2::zeros((d_out, rank)),
            scaling,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// `scaling * B A`.
    pub fn delta_w(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scaling
    }
}

/// Captured per-layer tensors from one forward/backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTape {
    /// `batch x d_in` layer inputs.
    pub x: Array2<f64>,
    /// `batch x d_out` gradients of the loss w.r.t. the pre-activation output.
    pub dy: Array2<f64>,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

impl LayerTape {
    /// Gradient w.r.t. the effective weight `W0 + scaling * B A`.
    pub fn grad_w(&self) -> Array2<f64> {
        self.dy.t().dot(&self.x)
    }

    pub fn grad_bias(&self) -> Array1<f64> {
        self.dy.sum_axis(Axis(0))
    }

    pub fn batch_size(&self) -> usize {
        self.x.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedLayer {
    pub base: BaseLayer,
    pub adapter: AdapterPair,
}

impl AdaptedLayer {
    pub fn effective_weight(&self) -> Array2<f64> {
        self.base.w0() + &self.adapter.delta_w()
    }

    fn linear(&self, x: &Array2<f64>) -> Array2<f64> {
        let ad = &self.adapter;
        let mut z = x.dot(&self.base.w0().t());
        let low = x.dot(&ad.a.t()).dot(&ad.b.t());
        z.scaled_add(ad.scaling, &low);
        if let Some(bias) = self.base.bias() {
            z += bias;
        }
        z
    }
}

#[derive(Debug, Clone, Default)]
struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

/// A feed-forward stack of adapted layers.
#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<AdaptedLayer>,
    cache: Option<ForwardCache>,
}

impl Model {
    /// Wraps base layers with freshly initialized adapters of rank `rank`.
    pub fn new<R: Rng + ?Sized>(
        bases: Vec<BaseLayer>,
        rank: usize,
        scaling: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if bases.is_empty() {
            return Err(GritError::Validation("model needs at least one layer".into()));
        }
        for pair in bases.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(GritError::shape(format!(
                    "layer output {} feeds layer input {}",
                    pair[0].d_out(),
                    pair[1].d_in()
                )));
            }
        }
        let layers = bases
            .into_iter()
            .map(|base| {
                let adapter = AdapterPair::init(base.d_in(), base.d_out(), rank, scaling, rng)?;
                Ok(AdaptedLayer { base, adapter })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            cache: None,
        })
    }

    pub fn from_layers(layers: Vec<AdaptedLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(GritError::Validation("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].base.d_out() != pair[1].base.d_in() {
                return Err(GritError::shape("adjacent layer dimensions disagree"));
            }
        }
        for l in &layers {
            let (r, din) = l.adapter.a.dim();
            let (dout, rb) = l.adapter.b.dim();
            if din != l.base.d_in() || dout != l.base.d_out() || r != rb {
                return Err(GritError::shape("adapter factors do not match base layer"));
            }
        }
        Ok(Self {
            layers,
            cache: None,
        })
    }

    pub fn layers(&self) -> &[AdaptedLayer] {
        &self.layers
    }

    pub fn adapter(&self, layer: usize) -> &AdapterPair {
        &self.layers[layer].adapter
    }

    pub fn adapter_mut(&mut self, layer: usize) -> &mut AdapterPair {
        &mut self.layers[layer].adapter
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut AdapterPair> {
        self.layers.iter_mut().map(|l| &mut l.adapter)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].base.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].base.d_out()
    }

    /// Base parameter count (weights and biases).
    pub fn base_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.base.w0().len() + l.base.bias().map_or(0, |b| b.len()))
            .sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| trainable_count(l.base.d_in(), l.base.d_out(), l.adapter.rank()))
            .sum()
    }

    /// Forward pass that records per-layer inputs for a later [`Model::backward`].
    pub fn forward(&mut self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        self.cache = None;
        self.check_input(batch)?;
        let mut cache = ForwardCache::default();
        let mut h = batch.clone();
        for layer in &self.layers {
            let z = layer.linear(&h);
            let next = layer.base.activation.apply(&z);
            cache.inputs.push(h);
            cache.pre_activations.push(z);
            h = next;
        }
        self.cache = Some(cache);
        Ok(h)
    }

    /// Forward pass without touching the tape.
    pub fn predict(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        for layer in &self.layers {
            let z = layer.linear(&h);
            h = layer.base.activation.apply(&z);
        }
        Ok(h)
    }

    /// Reverse pass for `loss_grad = dL/d(output)`; consumes the forward tape.
    pub fn backward(&mut self, loss_grad: &Array2<f64>) -> Result<Vec<LayerTape>> {
        let cache = self.cache.take().ok_or(GritError::TapeEmpty)?;
        let batch = cache.inputs[0].nrows();
        if loss_grad.dim() != (batch, self.d_out()) {
            return Err(GritError::shape(format!(
                "loss gradient {:?} does not match output ({batch}, {})",
                loss_grad.dim(),
                self.d_out()
            )));
        }
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut upstream = loss_grad.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[idx];
            let dz = layer.base.activation.backprop(&cache.pre_activations[idx], &upstream);
            let ad = &layer.adapter;
            // g_r rows: dz B  (batch x r); a_r rows: x A^T
            let g_r = dz.dot(&ad.b);
            let a_r = x.dot(&ad.a.t());
            let grad_b = dz.t().dot(&a_r) * ad.scaling;
            let grad_a = g_r.t().dot(x) * ad.scaling;
            if idx > 0 {
                let mut dx = dz.dot(layer.base.w0());
                dx.scaled_add(ad.scaling, &g_r.dot(&ad.a));
                upstream = dx;
            }
            tapes.push(LayerTape {
                x: x.clone(),
                dy: dz,
                grad_a,
                grad_b,
            });
        }
        tapes.reverse();
        Ok(tapes)
    }

    /// Copy with every `scaling * B A` folded into `W0` and zeroed adapters.
    pub fn densified(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let base = BaseLayer {
                    w0: l.effective_weight(),
                    bias: l.base.bias.clone(),
                    activation: l.base.activation,
                };
                let adapter = AdapterPair {
                    a: l.adapter.a.clone(),
                    b: Array2::zeros(l.adapter.b.dim()),
                    scaling: l.adapter.scaling,
                };
                AdaptedLayer { base, adapter }
            })
            .collect();
        Self {
            layers,
            cache: None,
        }
    }

    /// Copy whose base weights are replaced by `weights` (one per layer).
    pub fn with_base_weights(&self, weights: &[Array2<f64>]) -> Result<Self> {
        if weights.len() != self.layers.len() {
            return Err(GritError::shape("one weight matrix per layer required"));
        }
        let mut out = self.clone();
        out.cache = None;
        for (layer, w) in out.layers.iter_mut().zip(weights) {
            if w.dim() != layer.base.w0.dim() {
                return Err(GritError::shape("replacement weight has wrong shape"));
            }
            layer.base.w0 = w.clone();
        }
        Ok(out)
    }

    /// Base weights of every layer, in order.
    pub fn base_weights(&self) -> Vec<Array2<f64>> {
        self.layers.iter().map(|l| l.base.w0().clone()).collect()
    }

    fn check_input(&self, batch: &Array2<f64>) -> Result<()> {
        if batch.ncols() != self.d_in() {
            return Err(GritError::shape(format!(
                "batch width {} does not match input dimension {}",
                batch.ncols(),
                self.d_in()
            )));
        }
        Ok(())
    }
}

/// Trainable parameters added by a rank-`r` adapter on a `d_out x d_in` weight.
pub fn trainable_count(d_in: usize, d_out: usize, r: usize) -> usize {
    r * (d_in + d_out)
}

/// Mean over the batch of `0.5 * ||pred - target||^2`, and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = pred.nrows().max(1) as f64;
    let diff = pred - target;
    let loss = 0.5 * diff.iter().map(|v| v * v).sum::<f64>() / n;
    (loss, diff / n)
}

/// Serialized model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub step: usize,
    pub layers: Vec<AdaptedLayer>,
}

pub const CHECKPOINT_FORMAT: &str = "grit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn capture(model: &Model, seed: u64, step: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            step,
            layers: model.layers.clone(),
        }
    }

    pub fn restore(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(GritError::Validation(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        Model::from_layers(self.layers.clone())
    }
}
