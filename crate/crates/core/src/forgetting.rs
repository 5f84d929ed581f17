//! Quadratic forgetting estimators and scaling-law fitting.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{GritError, Result};
use crate::linalg::{damped_solve, SpectralDecomp, SymMatrix};
use crate::telemetry::xi_multiplier;

/// `1/2 sum_j max(lambda_j, 0) (u_j^T dw)^2`.
pub fn quadratic_forgetting(h_decomp: &SpectralDecomp, delta_w: &Array1<f64>) -> Result<f64> {
    if h_decomp.dim() != delta_w.len() {
        return Err(GritError::shape(format!(
            "Hessian dim {} vs update length {}",
            h_decomp.dim(),
            delta_w.len()
        )));
    }
    let proj = h_decomp.eigenvectors.t().dot(delta_w);
    Ok(0.5
        * h_decomp
            .eigenvalues
            .iter()
            .zip(proj.iter())
            .map(|(l, p)| l.max(0.0) * p * p)
            .sum::<f64>())
}

/// `1/2 tr(H Sigma)`.
pub fn trace_forgetting(h: &SymMatrix, sigma_delta: &SymMatrix) -> Result<f64> {
    if h.dim() != sigma_delta.dim() {
        return Err(GritError::shape(format!(
            "Hessian dim {} vs covariance dim {}",
            h.dim(),
            sigma_delta.dim()
        )));
    }
    let v = (h.as_array() * sigma_delta.as_array()).sum();
    Ok((0.5 * v).max(0.0))
}

/// Geometry statistics entering the capacity multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub r_eff: f64,
    pub rho_align: f64,
    pub pi_proj: f64,
}

impl Geometry {
    fn stat(&self, j: usize) -> f64 {
        match j {
            0 => self.r_eff,
            1 => self.rho_align,
            _ => self.pi_proj,
        }
    }
}

/// One observation for the law fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawSample {
    pub d_ft: f64,
    pub n_params: f64,
    pub pt_loss: f64,
    pub geometry: Option<Geometry>,
}

pub const GAMMA_NAMES: [&str; 3] = ["gamma_r", "gamma_a", "gamma_p"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Joint offset: pretrained loss plus irreducible error.
    pub c0: f64,
    pub a_coef: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_r: f64,
    pub gamma_a: f64,
    pub gamma_p: f64,
    pub residual_rms: f64,
    /// Names of geometry coefficients that could not be identified (held at zero).
    #[serde(default)]
    pub unidentifiable: Vec<String>,
}

impl ScalingFit {
    pub fn gammas(&self) -> (f64, f64, f64) {
        (self.gamma_r, self.gamma_a, self.gamma_p)
    }

    fn set_gamma(&mut self, j: usize, v: f64) {
        match j {
            0 => self.gamma_r = v,
            1 => self.gamma_a = v,
            _ => self.gamma_p = v,
        }
    }
}

/// `c0 + A D^beta / (Xi N)^alpha`; `Xi = 1` without geometry.
pub fn predict(fit: &ScalingFit, d_ft: f64, n: f64, geometry: Option<&Geometry>) -> f64 {
    let xi = match geometry {
        Some(g) => xi_multiplier(g.r_eff, g.rho_align, g.pi_proj, fit.gammas()).unwrap_or(f64::NAN),
        None => 1.0,
    };
    fit.c0 + fit.a_coef * d_ft.powf(fit.beta) / (xi * n).powf(fit.alpha)
}

fn distinct(values: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    v.len()
}

/// Ordinary least squares via the normal equations (tiny, well-scaled systems).
fn least_squares(x: &Array2<f64>, y: &Array1<f64>) -> Option<Array1<f64>> {
    let xtx = SymMatrix::new(x.t().dot(x)).ok()?;
    let xty = x.t().dot(y).insert_axis(ndarray::Axis(1));
    let sol = damped_solve(&xtx, 0.0, &xty).ok()?;
    if sol.multiplier != 1.0 {
        return None;
    }
    Some(sol.x.column(0).to_owned())
}

struct LogLinear {
    log_a: f64,
    beta: f64,
    alpha: f64,
    sse: f64,
}

fn fit_at_offset(samples: &[LawSample], c0: f64) -> Option<LogLinear> {
    let n = samples.len();
    let mut x = Array2::<f64>::zeros((n, 3));
    let mut y = Array1::<f64>::zeros(n);
    for (i, s) in samples.iter().enumerate() {
        let excess = s.pt_loss - c0;
        if !(excess > 0.0) {
            return None;
        }
        x[[i, 0]] = 1.0;
        x[[i, 1]] = s.d_ft.ln();
        x[[i, 2]] = -s.n_params.ln();
        y[i] = excess.ln();
    }
    let coef = least_squares(&x, &y)?;
    let sse = samples
        .iter()
        .map(|s| {
            let p = c0 + (coef[0] + coef[1] * s.d_ft.ln() - coef[2] * s.n_params.ln()).exp();
            (s.pt_loss - p).powi(2)
        })
        .sum();
    Some(LogLinear {
        log_a: coef[0],
        beta: coef[1],
        alpha: coef[2],
        sse,
    })
}

const C0_GRID: usize = 400;
const C0_TOL: f64 = 1e-8;

/// Fits `log(L - c0) = log A + beta log D - alpha log N`, searching the offset
/// `c0` over `[0, min L)` to minimise the squared error in loss space.
pub fn fit_baseline_law(samples: &[LawSample]) -> Result<ScalingFit> {
    if samples.len() < 6 {
        return Err(GritError::Underdetermined(format!(
            "records: need at least 6, got {}",
            samples.len()
        )));
    }
    for s in samples {
        if !(s.d_ft > 0.0 && s.n_params > 0.0 && s.pt_loss.is_finite()) {
            return Err(GritError::Validation(format!(
                "record with D = {}, N = {}, L = {} is not usable",
                s.d_ft, s.n_params, s.pt_loss
            )));
        }
    }
    let n_distinct = distinct(samples.iter().map(|s| s.n_params));
    if n_distinct < 2 {
        return Err(GritError::Underdetermined(format!(
            "n_params: need at least 2 distinct values, got {n_distinct}"
        )));
    }
    let d_distinct = distinct(samples.iter().map(|s| s.d_ft));
    if d_distinct < 3 {
        return Err(GritError::Underdetermined(format!(
            "d_ft: need at least 3 distinct values, got {d_distinct}"
        )));
    }
    let l_min = samples.iter().map(|s| s.pt_loss).fold(f64::INFINITY, f64::min);
    if !(l_min > 0.0) {
        return Err(GritError::Underdetermined(
            "pt_loss: minimum observed loss must be positive to bracket the offset".into(),
        ));
    }

    let hi = l_min * (1.0 - 1e-12);
    let sse = |c: f64| fit_at_offset(samples, c).map_or(f64::INFINITY, |f| f.sse);
    let step = hi / C0_GRID as f64;
    let mut best = (0usize, sse(0.0));
    for i in 1..C0_GRID {
        let v = sse(step * i as f64);
        if v < best.1 {
            best = (i, v);
        }
    }
    if !best.1.is_finite() {
        return Err(GritError::Underdetermined(
            "no admissible offset: design matrix is singular".into(),
        ));
    }
    let mut lo = step * best.0.saturating_sub(1) as f64;
    let mut up = (step * (best.0 + 1) as f64).min(hi);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = up - inv_phi * (up - lo);
    let mut x2 = lo + inv_phi * (up - lo);
    let (mut f1, mut f2) = (sse(x1), sse(x2));
    while up - lo > C0_TOL {
        if f1 <= f2 {
            up = x2;
            x2 = x1;
            f2 = f1;
            x1 = up - inv_phi * (up - lo);
            f1 = sse(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (up - lo);
            f2 = sse(x2);
        }
    }
    let mut c0 = 0.5 * (lo + up);
    if sse(c0) > best.1 {
        c0 = step * best.0 as f64;
    }
    let f = fit_at_offset(samples, c0).ok_or_else(|| {
        GritError::Underdetermined("offset search left no admissible fit".into())
    })?;
    Ok(ScalingFit {
        c0,
        a_coef: f.log_a.exp(),
        alpha: f.alpha,
        beta: f.beta,
        gamma_r: 0.0,
        gamma_a: 0.0,
        gamma_p: 0.0,
        residual_rms: (f.sse / samples.len() as f64).sqrt(),
        unidentifiable: Vec::new(),
    })
}

const LM_MAX_ITERS: usize = 500;

/// Fits the non-negative geometry coefficients with `(c0, A, alpha, beta)`
/// held at the baseline values, by projected Levenberg-Marquardt on the
/// log-excess residuals. Statistics that are constant across samples are
/// reported as unidentifiable and held at zero.
pub fn fit_xi_coefficients(samples: &[LawSample], baseline: &ScalingFit) -> Result<ScalingFit> {
    let rows: Vec<(&LawSample, Geometry)> = samples
        .iter()
        .filter_map(|s| s.geometry.map(|g| (s, g)))
        .collect();
    let mut fit = baseline.clone();
    fit.gamma_r = 0.0;
    fit.gamma_a = 0.0;
    fit.gamma_p = 0.0;
    fit.unidentifiable.clear();

    let mut free = Vec::new();
    for j in 0..3 {
        let vals: Vec<f64> = rows.iter().map(|(_, g)| g.stat(j)).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if vals.len() >= 2 && hi - lo > 1e-12 * hi.abs().max(1.0) {
            if lo < 0.0 {
                return Err(GritError::Validation(format!(
                    "{} statistic has negative values",
                    GAMMA_NAMES[j]
                )));
            }
            free.push(j);
        } else {
            fit.unidentifiable.push(GAMMA_NAMES[j].to_string());
        }
    }
    if free.is_empty() {
        return Err(GritError::Unidentifiable(
            "geometry statistics are constant across records".into(),
        ));
    }
    if baseline.alpha == 0.0 {
        return Err(GritError::Unidentifiable(
            "alpha = 0 removes the capacity multiplier from the law".into(),
        ));
    }

    let mut y = Vec::with_capacity(rows.len());
    for (s, _) in &rows {
        let excess = s.pt_loss - baseline.c0;
        if !(excess > 0.0) {
            return Err(GritError::Validation(format!(
                "loss {} not above fitted offset {}",
                s.pt_loss, baseline.c0
            )));
        }
        y.push(
            excess.ln() - baseline.a_coef.ln() - baseline.beta * s.d_ft.ln()
                + baseline.alpha * s.n_params.ln(),
        );
    }
    let alpha = baseline.alpha;
    let residuals = |gam: &[f64]| -> Vec<f64> {
        rows.iter()
            .zip(&y)
            .map(|((_, g), yi)| {
                let log_xi: f64 = free.iter().zip(gam).map(|(&j, gj)| (1.0 + gj * g.stat(j)).ln()).sum();
                yi + alpha * log_xi
            })
            .collect()
    };
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    let p = free.len();
    let mut gam = vec![0.0; p];
    let mut r = residuals(&gam);
    let mut c = cost(&r);
    let mut mu = 1e-3;
    for _ in 0..LM_MAX_ITERS {
        let mut jac = Array2::<f64>::zeros((rows.len(), p));
        for (i, (_, g)) in rows.iter().enumerate() {
            for (col, &j) in free.iter().enumerate() {
                let s = g.stat(j);
                jac[[i, col]] = alpha * s / (1.0 + gam[col] * s);
            }
        }
        let jtj = jac.t().dot(&jac);
        let jtr = jac.t().dot(&Array1::from(r.clone()));
        let mut improved = false;
        for _ in 0..30 {
            let mut lhs = jtj.clone();
            for d in 0..p {
                lhs[[d, d]] += mu * jtj[[d, d]].max(1e-12);
            }
            let step = SymMatrix::new(lhs)
                .and_then(|m| damped_solve(&m, 0.0, &(-&jtr).insert_axis(ndarray::Axis(1))));
            let Ok(step) = step else {
                mu *= 10.0;
                continue;
            };
            let cand: Vec<f64> = gam
                .iter()
                .zip(step.x.column(0))
                .map(|(g, d)| (g + d).max(0.0))
                .collect();
            let rc = residuals(&cand);
            let cc = cost(&rc);
            if cc < c {
                let moved = cand.iter().zip(&gam).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                gam = cand;
                r = rc;
                c = cc;
                mu = (mu / 10.0).max(1e-12);
                improved = moved > 1e-15;
                break;
            }
            mu *= 10.0;
        }
        if !improved || c < 1e-30 {
            break;
        }
    }
    for (col, &j) in free.iter().enumerate() {
        fit.set_gamma(j, gam[col]);
    }
    let sq: f64 = rows
        .iter()
        .map(|(s, g)| (s.pt_loss - predict(&fit, s.d_ft, s.n_params, Some(g))).powi(2))
        .sum();
    fit.residual_rms = (sq / rows.len() as f64).sqrt();
    Ok(fit)
}
