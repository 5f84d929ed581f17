//! Rank-space K-FAC statistics for one adapted layer.
//!
//! With `a_r = A x` and `g_r = B^T g`, the Fisher restricted to the adapter
//! subspace is approximated by `Sigma_g kron Sigma_a`, so the natural gradient
//! decouples into `grad_B Sigma_g^-1` and `Sigma_a^-1 grad_A`. Only `r x r`
//! matrices are ever inverted.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{GritError, Result};
use crate::linalg::{damped_solve, sym_eig, symmetrize, SpectralDecomp, SymMatrix};
use crate::model::{AdapterPair, LayerTape};

/// Outcome of [`RankSpaceStats::refresh_inverses`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InverseStatus {
    /// Fewer than the required number of samples have been accumulated.
    GatePending { n_cov: usize, required: usize },
    Refreshed { multiplier_a: f64, multiplier_g: f64 },
}

#[derive(Debug, Clone)]
pub struct RankSpaceStats {
    a_cov: SymMatrix,
    g_cov: SymMatrix,
    n_cov: usize,
    inv_a: Option<Array2<f64>>,
    inv_g: Option<Array2<f64>>,
    inv_ready: bool,
    damping: f64,
    ema_beta: Option<f64>,
    sanitized: usize,
}

impl RankSpaceStats {
    /// Covariances start at the identity with a zero sample count.
    pub fn new(rank: usize, damping: f64, ema_beta: Option<f64>) -> Result<Self> {
        if rank == 0 {
            return Err(GritError::Bound("rank must be positive".into()));
        }
        if !(damping >= 0.0) || !damping.is_finite() {
            return Err(GritError::Validation(format!("invalid damping {damping}")));
        }
        if let Some(beta) = ema_beta {
            if !(0.0..1.0).contains(&beta) {
                return Err(GritError::Validation(format!(
                    "ema_beta must lie in [0, 1), got {beta}"
                )));
            }
        }
        Ok(Self {
            a_cov: SymMatrix::identity(rank),
            g_cov: SymMatrix::identity(rank),
            n_cov: 0,
            inv_a: None,
            inv_g: None,
            inv_ready: false,
            damping,
            ema_beta,
            sanitized: 0,
        })
    }

    /// Stats seeded with explicit covariances and sample count.
    pub fn with_covariances(
        a_cov: SymMatrix,
        g_cov: SymMatrix,
        n_cov: usize,
        damping: f64,
        ema_beta: Option<f64>,
    ) -> Result<Self> {
        if a_cov.dim() != g_cov.dim() {
            return Err(GritError::shape("a_cov and g_cov must share the rank"));
        }
        let mut s = Self::new(a_cov.dim(), damping, ema_beta)?;
        s.a_cov = a_cov;
        s.g_cov = g_cov;
        s.n_cov = n_cov;
        Ok(s)
    }

    pub fn rank(&self) -> usize {
        self.a_cov.dim()
    }

    pub fn a_cov(&self) -> &SymMatrix {
        &self.a_cov
    }

    pub fn g_cov(&self) -> &SymMatrix {
        &self.g_cov
    }

    pub fn n_cov(&self) -> usize {
        self.n_cov
    }

    pub fn inv_a(&self) -> Option<&Array2<f64>> {
        self.inv_a.as_ref()
    }

    pub fn inv_g(&self) -> Option<&Array2<f64>> {
        self.inv_g.as_ref()
    }

    pub fn inv_ready(&self) -> bool {
        self.inv_ready
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn set_damping(&mut self, damping: f64) {
        self.damping = damping;
    }

    pub fn ema_beta(&self) -> Option<f64> {
        self.ema_beta
    }

    /// Number of non-finite gradient entries zeroed by [`RankSpaceStats::precondition`].
    pub fn sanitized_count(&self) -> usize {
        self.sanitized
    }

    pub fn a_decomp(&self) -> Result<SpectralDecomp> {
        sym_eig(&self.a_cov)
    }

    pub fn g_decomp(&self) -> Result<SpectralDecomp> {
        sym_eig(&self.g_cov)
    }

    /// Folds one minibatch into the covariances.
    ///
    /// Rows of `a_r = X A^T` and of the per-sample gradients `g_r = (n dY) B`
    /// each contribute one outer product. Without `ema_beta` this is an exact
    /// running mean over all samples seen; with it, an EMA over minibatch means.
    pub fn accumulate(&mut self, tape: &LayerTape, adapter: &AdapterPair) -> Result<()> {
        let r = self.rank();
        if adapter.rank() != r {
            return Err(GritError::shape(format!(
                "stats rank {r} vs adapter rank {}",
                adapter.rank()
            )));
        }
        let batch = tape.batch_size();
        if batch == 0 {
            return Ok(());
        }
        let a_r = tape.x.dot(&adapter.a.t());
        let g_r = tape.dy.dot(&adapter.b) * batch as f64;
        let s_a = a_r.t().dot(&a_r) / batch as f64;
        let s_g = g_r.t().dot(&g_r) / batch as f64;
        self.fold(s_a, s_g, batch)
    }

    /// Folds a precomputed minibatch-mean pair of second moments covering `batch` samples.
    pub fn fold(&mut self, s_a: Array2<f64>, s_g: Array2<f64>, batch: usize) -> Result<()> {
        let r = self.rank();
        if s_a.dim() != (r, r) || s_g.dim() != (r, r) {
            return Err(GritError::shape("minibatch moments must be r x r"));
        }
        let prev = self.n_cov;
        let total = prev + batch;
        let (keep, take) = match self.ema_beta {
            _ if prev == 0 => (0.0, 1.0),
            Some(beta) => (beta, 1.0 - beta),
            None => (prev as f64 / total as f64, batch as f64 / total as f64),
        };
        let next_a = self.a_cov.as_array() * keep + s_a * take;
        let next_g = self.g_cov.as_array() * keep + s_g * take;
        self.a_cov = SymMatrix::named("a_cov", next_a)?;
        self.g_cov = SymMatrix::named("g_cov", next_g)?;
        self.n_cov = total;
        Ok(())
    }

    /// Recomputes both damped inverses once `n_cov >= min_samples`.
    pub fn refresh_inverses(&mut self, min_samples: usize) -> Result<InverseStatus> {
        if self.n_cov < min_samples {
            return Ok(InverseStatus::GatePending {
                n_cov: self.n_cov,
                required: min_samples,
            });
        }
        let r = self.rank();
        let eye = Array2::eye(r);
        let a = damped_solve(&self.a_cov, self.damping, &eye)?;
        let g = damped_solve(&self.g_cov, self.damping, &eye)?;
        self.inv_a = Some(symmetrize(a.x.view()));
        self.inv_g = Some(symmetrize(g.x.view()));
        self.inv_ready = true;
        Ok(InverseStatus::Refreshed {
            multiplier_a: a.multiplier,
            multiplier_g: g.multiplier,
        })
    }

    /// `(inv_a * grad_a, grad_b * inv_g)`, with non-finite entries replaced by zero.
    pub fn precondition(
        &mut self,
        grad_a: &Array2<f64>,
        grad_b: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (inv_a, inv_g) = match (&self.inv_a, &self.inv_g, self.inv_ready) {
            (Some(a), Some(g), true) => (a, g),
            _ => return Err(GritError::PreconditionUnavailable),
        };
        let r = self.rank();
        if grad_a.nrows() != r || grad_b.ncols() != r {
            return Err(GritError::shape("gradient shapes do not match stats rank"));
        }
        let mut nat_a = inv_a.dot(grad_a);
        let mut nat_b = grad_b.dot(inv_g);
        let mut bad = 0;
        for v in nat_a.iter_mut().chain(nat_b.iter_mut()) {
            if !v.is_finite() {
                *v = 0.0;
                bad += 1;
            }
        }
        self.sanitized += bad;
        Ok((nat_a, nat_b))
    }

    /// Drops cached inverses and accumulated samples.
    pub fn reset(&mut self) {
        let r = self.rank();
        self.a_cov = SymMatrix::identity(r);
        self.g_cov = SymMatrix::identity(r);
        self.n_cov = 0;
        self.inv_a = None;
        self.inv_g = None;
        self.inv_ready = false;
    }

    pub fn snapshot(&self, step: usize, layer: usize) -> StatsSnapshot {
        StatsSnapshot {
            step,
            layer,
            n_cov: self.n_cov,
            a_cov: rows_of(self.a_cov.as_array()),
            g_cov: rows_of(self.g_cov.as_array()),
        }
    }
}

/// `lambda0 * (b_ref / b_eff)^gamma`: stronger damping for small effective batches.
pub fn batch_aware_damping(lambda0: f64, b_eff: f64, b_ref: f64, gamma: f64) -> f64 {
    lambda0 * (b_ref / b_eff).powf(gamma)
}

/// Serializable per-layer covariance snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub step: usize,
    pub layer: usize,
    pub n_cov: usize,
    pub a_cov: Vec<Vec<f64>>,
    pub g_cov: Vec<Vec<f64>>,
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}
