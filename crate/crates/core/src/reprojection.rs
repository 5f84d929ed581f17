//! Fisher-guided subspace maintenance.
//!
//! Periodically the adapter factors are projected onto the top-`k`
//! eigenvectors of the rank-space covariances: `A <- P_A A` and
//! `B <- B P_G` (or `B P_A` while the G side is under-sampled). The rank `k`
//! is the smallest spectral prefix reaching energy fraction `tau`, clamped
//! to `[min_rank, r]`. Tensors are never resized, so suppressed directions
//! can re-enter later.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{GritError, Result};
use crate::kfac::RankSpaceStats;
use crate::linalg::{frobenius, SpectralDecomp, SymMatrix};
use crate::model::AdapterPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionPolicy {
    /// Energy threshold in (0, 1].
    pub tau: f64,
    pub min_rank: usize,
    pub reproj_freq: usize,
    pub warmup_steps: usize,
    pub two_sided: bool,
    /// Interpolation weight; 1 is a hard projection.
    pub blend_gamma: f64,
    /// Samples required before the G-side basis is trusted.
    pub g_gate_min_samples: usize,
    /// Samples required before any reprojection.
    pub min_samples: usize,
    pub rank_adaptation: bool,
    pub rank_adaptation_start_step: usize,
    /// Rank used when adaptation is off or not yet started.
    pub fixed_k: Option<usize>,
    /// Keep the previous `k` while its energy stays within `tau +- eps`.
    pub hysteresis: Option<f64>,
}

impl ReprojectionPolicy {
    pub fn validate(&self, rank: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(GritError::Validation(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.min_rank == 0 || self.min_rank > rank {
            return Err(GritError::Validation(format!(
                "min_rank {} must lie in [1, {rank}]",
                self.min_rank
            )));
        }
        if self.reproj_freq == 0 {
            return Err(GritError::Validation("reproj_freq must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.blend_gamma) {
            return Err(GritError::Validation(format!(
                "blend_gamma must lie in [0, 1], got {}",
                self.blend_gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankSelection {
    pub k: usize,
    /// Set when the spectrum carried no energy at all.
    pub degenerate: bool,
}

/// Cumulative energy fractions `E(j) = sum_{i<=j} lambda_i / sum_i lambda_i`.
///
/// Negative round-off is clipped to zero. Returns `None` for a zero spectrum.
pub fn cumulative_energy(eigenvalues: &[f64]) -> Option<Vec<f64>> {
    let clipped: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut acc = 0.0;
    Some(
        clipped
            .iter()
            .map(|v| {
                acc += v;
                acc / total
            })
            .collect(),
    )
}

/// Smallest prefix reaching energy `tau`, clamped to `[min_rank, r]`.
pub fn select_rank(eigenvalues: &[f64], tau: f64, min_rank: usize) -> RankSelection {
    let r = eigenvalues.len();
    let floor = min_rank.min(r).max(1);
    match cumulative_energy(eigenvalues) {
        None => RankSelection {
            k: floor,
            degenerate: true,
        },
        Some(energy) => {
            let k = energy.iter().position(|&e| e >= tau).map_or(r, |i| i + 1);
            RankSelection {
                k: k.clamp(floor, r),
                degenerate: false,
            }
        }
    }
}

/// Rank selection with an optional hysteresis band around `tau`.
pub fn select_rank_with_hysteresis(
    eigenvalues: &[f64],
    tau: f64,
    min_rank: usize,
    previous: Option<usize>,
    band: Option<f64>,
) -> RankSelection {
    if let (Some(prev), Some(eps)) = (previous, band) {
        if let Some(energy) = cumulative_energy(eigenvalues) {
            if prev >= 1 && prev <= energy.len() && prev >= min_rank {
                let e = energy[prev - 1];
                if (e - tau).abs() <= eps {
                    return RankSelection {
                        k: prev,
                        degenerate: false,
                    };
                }
            }
        }
    }
    select_rank(eigenvalues, tau, min_rank)
}

/// Orthogonal projector `basis basis^T` onto a `k`-dimensional subspace of rank space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    basis: Array2<f64>,
}

impl Projector {
    pub fn from_basis(basis: Array2<f64>) -> Self {
        Self { basis }
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn matrix(&self) -> Array2<f64> {
        self.basis.dot(&self.basis.t())
    }

    /// `P m` for `m` with `r` rows.
    pub fn apply_left(&self, m: &Array2<f64>) -> Array2<f64> {
        self.basis.dot(&self.basis.t().dot(m))
    }

    /// `m P` for `m` with `r` columns.
    pub fn apply_right(&self, m: &Array2<f64>) -> Array2<f64> {
        m.dot(&self.basis).dot(&self.basis.t())
    }
}

/// Projector onto the leading `k` eigenvectors.
pub fn make_projector(decomp: &SpectralDecomp, k: usize) -> Result<Projector> {
    let r = decomp.dim();
    if k == 0 || k > r {
        return Err(GritError::Bound(format!("projector rank {k} outside [1, {r}]")));
    }
    Ok(Projector {
        basis: decomp.eigenvectors.slice(s![.., ..k]).to_owned(),
    })
}

/// `tr(h sigma)`.
pub fn curvature_energy(h: &SymMatrix, sigma: &SymMatrix) -> Result<f64> {
    if h.dim() != sigma.dim() {
        return Err(GritError::shape(format!(
            "curvature_energy: {} vs {}",
            h.dim(),
            sigma.dim()
        )));
    }
    Ok((h.as_array() * sigma.as_array()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// `B` projected with the A-side basis.
    A,
    /// `B` projected with the G-side basis.
    G,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprojectionGate {
    Warmup,
    OffCadence,
    SamplesPending,
}

/// What a reprojection event did to one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionEvent {
    pub step: usize,
    pub layer: usize,
    pub side_used: Side,
    pub k: usize,
    pub tau: f64,
    /// `||P_A A||_F^2 / ||A||_F^2` before blending.
    pub retained_mass: f64,
    /// A-side cumulative energy at `k`.
    pub energy: f64,
    pub degenerate_spectrum: bool,
    pub delta_w_norm_before: f64,
    pub delta_w_norm_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReprojectionOutcome {
    Skipped(ReprojectionGate),
    Applied {
        event: ReprojectionEvent,
        projector_a: Projector,
        projector_b: Projector,
    },
}

/// Whether the cadence, warmup and sample gates allow a reprojection at `step`.
pub fn reprojection_gate(
    stats: &RankSpaceStats,
    policy: &ReprojectionPolicy,
    step: usize,
) -> Option<ReprojectionGate> {
    if step < policy.warmup_steps {
        Some(ReprojectionGate::Warmup)
    } else if step % policy.reproj_freq != 0 {
        Some(ReprojectionGate::OffCadence)
    } else if stats.n_cov() < policy.min_samples {
        Some(ReprojectionGate::SamplesPending)
    } else {
        None
    }
}

/// Gated one- or two-sided reprojection of one layer's adapter.
///
/// `previous_k` feeds the optional hysteresis band.
pub fn reproject(
    adapter: &mut AdapterPair,
    stats: &RankSpaceStats,
    policy: &ReprojectionPolicy,
    step: usize,
    layer: usize,
    previous_k: Option<usize>,
) -> Result<ReprojectionOutcome> {
    if let Some(gate) = reprojection_gate(stats, policy, step) {
        return Ok(ReprojectionOutcome::Skipped(gate));
    }
    let r = adapter.rank();
    if stats.rank() != r {
        return Err(GritError::shape("stats rank differs from adapter rank"));
    }
    let a_decomp = stats.a_decomp()?;
    let eig_a = a_decomp.eigenvalues.to_vec();
    let selection = if policy.rank_adaptation && step >= policy.rank_adaptation_start_step {
        select_rank_with_hysteresis(&eig_a, policy.tau, policy.min_rank, previous_k, policy.hysteresis)
    } else {
        RankSelection {
            k: policy.fixed_k.unwrap_or(r).clamp(1, r),
            degenerate: false,
        }
    };
    let k = selection.k;
    let projector_a = make_projector(&a_decomp, k)?;

    let use_g = policy.two_sided && stats.inv_ready() && stats.n_cov() >= policy.g_gate_min_samples;
    let (side_used, projector_b) = if use_g {
        (Side::G, make_projector(&stats.g_decomp()?, k)?)
    } else {
        (Side::A, projector_a.clone())
    };

    let before = frobenius(&adapter.delta_w());
    let projected_a = projector_a.apply_left(&adapter.a);
    let projected_b = projector_b.apply_right(&adapter.b);
    let a_mass = adapter.a.iter().map(|v| v * v).sum::<f64>();
    let retained_mass = if a_mass > 0.0 {
        projected_a.iter().map(|v| v * v).sum::<f64>() / a_mass
    } else {
        1.0
    };
    let gamma = policy.blend_gamma;
    if gamma == 1.0 {
        adapter.a = projected_a;
        adapter.b = projected_b;
    } else {
        adapter.a = &adapter.a * (1.0 - gamma) + projected_a * gamma;
        adapter.b = &adapter.b * (1.0 - gamma) + projected_b * gamma;
    }
    let after = frobenius(&adapter.delta_w());
    let energy = cumulative_energy(&eig_a).map_or(1.0, |e| e[k - 1]);

    Ok(ReprojectionOutcome::Applied {
        event: ReprojectionEvent {
            step,
            layer,
            side_used,
            k,
            tau: policy.tau,
            retained_mass,
            energy,
            degenerate_spectrum: selection.degenerate,
            delta_w_norm_before: before,
            delta_w_norm_after: after,
        },
        projector_a,
        projector_b,
    })
}
