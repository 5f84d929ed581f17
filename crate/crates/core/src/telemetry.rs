//! Geometry summaries, stability diagnostics and the telemetry stream.

use std::io::{BufRead, Write};

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{GritError, Result};
use crate::linalg::{frobenius, sym_eig, SymMatrix};
use crate::model::AdapterPair;
use crate::reprojection::{select_rank, Projector, RankSelection};

pub const TELEMETRY_SCHEMA: &str = "grit-telemetry";
pub const TELEMETRY_VERSION: u32 = 1;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Per-(step, layer) geometry snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRecord {
    pub step: usize,
    pub layer: usize,
    pub k_selected: usize,
    pub r_eff: usize,
    pub rho_align: f64,
    pub pi_proj: f64,
    pub tail_mass: usize,
    pub curvature_exposure: f64,
    pub jitter: f64,
    pub subspace_drift: f64,
    pub eig_cv: f64,
    pub cov_var: f64,
    pub spectrum: Vec<f64>,
}

/// Smallest eigenvalue prefix reaching fraction `eta` (no clamping).
///
/// A zero spectrum yields `k = 1` with the degenerate flag set.
pub fn effective_rank(eigenvalues: &[f64], eta: f64) -> RankSelection {
    let sel = select_rank(eigenvalues, eta, 1);
    if sel.degenerate {
        RankSelection {
            k: 1,
            degenerate: true,
        }
    } else {
        sel
    }
}

/// Number of coordinates with `|v| > threshold`.
pub fn tail_mass(delta_w: &[f64], threshold: f64) -> usize {
    delta_w.iter().filter(|v| v.abs() > threshold).count()
}

fn check_orthonormal(name: &str, basis: &Array2<f64>) -> Result<()> {
    let gram = basis.t().dot(basis);
    let dev = frobenius(&(gram - Array2::<f64>::eye(basis.ncols())));
    if dev > ORTHONORMAL_TOL {
        return Err(GritError::Validation(format!(
            "{name} is not column-orthonormal (gram deviation {dev:.3e})"
        )));
    }
    Ok(())
}

fn check_pair(u: &Array2<f64>, v: &Array2<f64>) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(GritError::shape(format!(
            "bases must share shape, got {:?} and {:?}",
            u.dim(),
            v.dim()
        )));
    }
    if u.ncols() == 0 {
        return Err(GritError::shape("bases must have at least one column"));
    }
    check_orthonormal("first basis", u)?;
    check_orthonormal("second basis", v)
}

/// `||U^T V||_F^2 / k`: mean squared cosine of the principal angles.
pub fn alignment_overlap(fisher_basis: &Array2<f64>, update_basis: &Array2<f64>) -> Result<f64> {
    check_pair(fisher_basis, update_basis)?;
    let k = fisher_basis.ncols() as f64;
    let m = fisher_basis.t().dot(update_basis);
    Ok((m.iter().map(|v| v * v).sum::<f64>() / k).clamp(0.0, 1.0))
}

/// `||P v||^2 / ||v||^2`, or `None` for a zero vector.
pub fn retained_mass(projector: &Projector, delta_w: &Array1<f64>) -> Option<f64> {
    let col = delta_w.view().insert_axis(ndarray::Axis(1)).to_owned();
    retained_mass_matrix(projector, &col)
}

/// Column-wise version of [`retained_mass`]: `||P M||_F^2 / ||M||_F^2`.
pub fn retained_mass_matrix(projector: &Projector, m: &Array2<f64>) -> Option<f64> {
    let total = m.iter().map(|v| v * v).sum::<f64>();
    if !(total > 0.0) {
        return None;
    }
    let kept = projector.apply_left(m).iter().map(|v| v * v).sum::<f64>();
    Some((kept / total).clamp(0.0, 1.0))
}

/// `tr(P H P)` for a full-dimensional projector `P`.
pub fn curvature_exposure(h_pt: &SymMatrix, projector_full: &Array2<f64>) -> Result<f64> {
    let n = h_pt.dim();
    if projector_full.dim() != (n, n) {
        return Err(GritError::shape(format!(
            "projector {:?} vs Hessian {n}x{n}",
            projector_full.dim()
        )));
    }
    // tr(P H P) = sum_ij (P H)_ij P_ji
    let ph = projector_full.dot(h_pt.as_array());
    Ok((ph * &projector_full.t()).sum().max(0.0))
}

/// `tr(P H P)` when `P` is an orthogonal projector, via `tr(P H P) = sum(H o P)`.
pub fn orthogonal_projector_exposure(h_pt: &SymMatrix, projector: &Array2<f64>) -> Result<f64> {
    let n = h_pt.dim();
    if projector.dim() != (n, n) {
        return Err(GritError::shape(format!(
            "projector {:?} vs Hessian {n}x{n}",
            projector.dim()
        )));
    }
    Ok((h_pt.as_array() * projector).sum().max(0.0))
}

/// `1 - cos(p_t, p_prev)`, or `None` if either vector is zero.
pub fn update_jitter(p_t: &[f64], p_prev: &[f64]) -> Option<f64> {
    if p_t.len() != p_prev.len() {
        return None;
    }
    let dot: f64 = p_t.iter().zip(p_prev).map(|(a, b)| a * b).sum();
    let na = p_t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = p_prev.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return None;
    }
    Some((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// `||sin Theta(U_t, U_next)||_F = sqrt(k - ||U_t^T U_next||_F^2)`.
pub fn subspace_drift(u_t: &Array2<f64>, u_next: &Array2<f64>) -> Result<f64> {
    check_pair(u_t, u_next)?;
    let k = u_t.ncols() as f64;
    let overlap = u_t.t().dot(u_next).iter().map(|v| v * v).sum::<f64>();
    Ok((k - overlap).max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityStats {
    /// Mean squared Frobenius deviation from the time-mean.
    pub cov_var: f64,
    /// Mean over the top-k eigenvalues of Std / Mean (population std).
    pub eig_cv: f64,
    /// Eigen-indices whose mean was zero and were left out of `eig_cv`.
    pub skipped: Vec<usize>,
}

pub fn stability_stats(cov_sequence: &[SymMatrix], k: usize) -> Result<StabilityStats> {
    let t = cov_sequence.len();
    if t < 2 {
        return Err(GritError::Validation(
            "stability_stats needs at least two covariances".into(),
        ));
    }
    let dim = cov_sequence[0].dim();
    if cov_sequence.iter().any(|c| c.dim() != dim) {
        return Err(GritError::shape("covariance sequence dims differ"));
    }
    if k == 0 || k > dim {
        return Err(GritError::Bound(format!("k = {k} outside [1, {dim}]")));
    }
    let mut mean = Array2::<f64>::zeros((dim, dim));
    for c in cov_sequence {
        mean += c.as_array();
    }
    mean /= t as f64;
    let cov_var = cov_sequence
        .iter()
        .map(|c| {
            let d = c.as_array() - &mean;
            d.iter().map(|v| v * v).sum::<f64>()
        })
        .sum::<f64>()
        / t as f64;

    let mut eigs = Vec::with_capacity(t);
    for c in cov_sequence {
        eigs.push(sym_eig(c)?.eigenvalues);
    }
    let mut cv_sum = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for i in 0..k {
        let m = eigs.iter().map(|e| e[i]).sum::<f64>() / t as f64;
        if m == 0.0 {
            skipped.push(i);
            continue;
        }
        let var = eigs.iter().map(|e| (e[i] - m).powi(2)).sum::<f64>() / t as f64;
        cv_sum += var.sqrt() / m.abs();
        used += 1;
    }
    let eig_cv = if used > 0 { cv_sum / used as f64 } else { 0.0 };
    Ok(StabilityStats {
        cov_var,
        eig_cv,
        skipped,
    })
}

/// `(1 + g_r r_eff)(1 + g_a rho)(1 + g_p pi)`.
pub fn xi_multiplier(r_eff: f64, rho_align: f64, pi_proj: f64, gammas: (f64, f64, f64)) -> Result<f64> {
    let (gr, ga, gp) = gammas;
    if gr < 0.0 || ga < 0.0 || gp < 0.0 || !(gr.is_finite() && ga.is_finite() && gp.is_finite()) {
        return Err(GritError::Validation(format!(
            "geometry coefficients must be non-negative, got ({gr}, {ga}, {gp})"
        )));
    }
    Ok((1.0 + gr * r_eff) * (1.0 + ga * rho_align) * (1.0 + gp * pi_proj))
}

/// Two-dimensional PCA embedding of a cloud of update vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaEmbedding {
    pub coords: Vec<[f64; 2]>,
    /// Variance along PC1 and PC2 (eigenvalues of the sample covariance).
    pub explained: [f64; 2],
    pub degenerate: bool,
}

/// Mean-centres the vectors and projects them on the top two principal axes,
/// obtained from the eigendecomposition of the centred Gram matrix.
pub fn pca_export(update_vectors: &[Array1<f64>]) -> Result<PcaEmbedding> {
    let n = update_vectors.len();
    if n < 3 {
        return Err(GritError::Validation(format!("PCA needs at least 3 vectors, got {n}")));
    }
    let d = update_vectors[0].len();
    if update_vectors.iter().any(|v| v.len() != d) {
        return Err(GritError::shape("update vectors have differing lengths"));
    }
    let mut x = Array2::<f64>::zeros((n, d));
    for (i, v) in update_vectors.iter().enumerate() {
        x.row_mut(i).assign(v);
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    x -= &mean;
    let gram = SymMatrix::named("pca_gram", x.dot(&x.t()))?;
    let decomp = sym_eig(&gram)?;
    let mut coords = vec![[0.0; 2]; n];
    let mut explained = [0.0; 2];
    let scale = gram.trace().max(f64::MIN_POSITIVE);
    for c in 0..2.min(n) {
        let lam = decomp.eigenvalues[c];
        explained[c] = lam.max(0.0) / (n - 1) as f64;
        if lam > 1e-12 * scale {
            let s = lam.sqrt();
            for i in 0..n {
                coords[i][c] = decomp.eigenvectors[[i, c]] * s;
            }
        }
    }
    Ok(PcaEmbedding {
        coords,
        explained,
        degenerate: d < 2,
    })
}

/// Projector (in row-major `vec(W)` coordinates) onto the tangent space of
/// `(A, B) -> scaling * B A` at the current factors:
/// `I kron P_V + P_U kron (I - P_V)`, with `P_V` onto the row space of `A`
/// and `P_U` onto the column space of `B`.
pub fn adapter_tangent_projector(adapter: &AdapterPair) -> Result<Array2<f64>> {
    let d_in = adapter.a.ncols();
    let d_out = adapter.b.nrows();
    let p_v = range_projector(&adapter.a.t().to_owned())?;
    let p_u = range_projector(&adapter.b)?;
    let n = d_out * d_in;
    let mut out = Array2::<f64>::zeros((n, n));
    let comp_v = Array2::<f64>::eye(d_in) - &p_v;
    for i in 0..d_out {
        for j in 0..d_out {
            let u = p_u[[i, j]];
            let mut block = out.slice_mut(s![i * d_in..(i + 1) * d_in, j * d_in..(j + 1) * d_in]);
            if i == j {
                block += &p_v;
            }
            if u != 0.0 {
                block.scaled_add(u, &comp_v);
            }
        }
    }
    Ok(out)
}

/// Orthogonal projector onto the column space of `m`.
pub fn range_projector(m: &Array2<f64>) -> Result<Array2<f64>> {
    let rows = m.nrows();
    let gram = SymMatrix::named("range_gram", m.t().dot(m))?;
    let decomp = sym_eig(&gram)?;
    let top = decomp.eigenvalues.first().copied().unwrap_or(0.0);
    let mut p = Array2::<f64>::zeros((rows, rows));
    if !(top > 0.0) {
        return Ok(p);
    }
    for (c, &lam) in decomp.eigenvalues.iter().enumerate() {
        if lam > 1e-10 * top {
            let u = m.dot(&decomp.eigenvectors.column(c)) / lam.sqrt();
            for i in 0..rows {
                for j in 0..rows {
                    p[[i, j]] += u[i] * u[j];
                }
            }
        }
    }
    Ok(p)
}

/// Append-only newline-delimited JSON writer with a schema header line.
pub struct JsonlWriter<W: Write> {
    out: W,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub schema: String,
    pub version: u32,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(mut out: W, schema: &str) -> Result<Self> {
        let header = StreamHeader {
            schema: schema.to_string(),
            version: TELEMETRY_VERSION,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        Ok(Self { out })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Reads a stream written by [`JsonlWriter`], checking the header schema.
pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(input: R, schema: &str) -> Result<Vec<T>> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| GritError::Validation("empty stream".into()))??;
    let header: StreamHeader = serde_json::from_str(&header_line)?;
    if header.schema != schema || header.version != TELEMETRY_VERSION {
        return Err(GritError::Validation(format!(
            "expected {schema} v{TELEMETRY_VERSION}, found {} v{}",
            header.schema, header.version
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Writes `coords` as `index,pc1,pc2` CSV.
pub fn write_pca_csv<W: Write>(mut out: W, emb: &PcaEmbedding) -> Result<()> {
    writeln!(out, "index,pc1,pc2")?;
    for (i, c) in emb.coords.iter().enumerate() {
        writeln!(out, "{i},{},{}", c[0], c[1])?;
    }
    Ok(())
}

/// Rolling per-layer state needed to compute a [`GeometryRecord`].
///
/// The update covariance and the retained-mass numerator cover the window
/// since the last reprojection event; jitter and covariance stability cover
/// the window since the last emitted record.
#[derive(Debug, Clone)]
pub struct LayerGeometryTracker {
    rank: usize,
    update_cov: Array2<f64>,
    update_sum: Array2<f64>,
    update_steps: usize,
    prev_update: Option<Vec<f64>>,
    jitter_sum: f64,
    jitter_count: usize,
    cov_window: Vec<SymMatrix>,
    prev_fisher_basis: Option<Array2<f64>>,
}

/// Inputs for [`LayerGeometryTracker::record`] that come from the trainer.
pub struct RecordContext<'a> {
    pub step: usize,
    pub layer: usize,
    pub k_selected: usize,
    pub eta: f64,
    pub tail_threshold: f64,
    pub adapter: &'a AdapterPair,
    pub a_spectrum: Vec<f64>,
    /// Fisher basis for alignment: G side when trusted, else A side (r x r, sorted).
    pub fisher_vectors: &'a Array2<f64>,
    /// This layer's block of the pretraining Hessian, if the task provides one.
    pub hessian_block: Option<&'a SymMatrix>,
}

impl LayerGeometryTracker {
    pub fn new(rank: usize, d_in: usize, d_out: usize) -> Self {
        Self {
            rank,
            update_cov: Array2::zeros((rank, rank)),
            update_sum: Array2::zeros((rank, d_in + d_out)),
            update_steps: 0,
            prev_update: None,
            jitter_sum: 0.0,
            jitter_count: 0,
            cov_window: Vec::new(),
            prev_fisher_basis: None,
        }
    }

    /// Records one optimizer step's change of the factors.
    pub fn observe_update(&mut self, delta_a: &Array2<f64>, delta_b: &Array2<f64>) {
        let d_in = delta_a.ncols();
        let mut m = Array2::<f64>::zeros((self.rank, self.update_sum.ncols()));
        m.slice_mut(s![.., ..d_in]).assign(delta_a);
        m.slice_mut(s![.., d_in..]).assign(&delta_b.t());
        self.update_cov += &m.dot(&m.t());
        self.update_sum += &m;
        self.update_steps += 1;
        let flat: Vec<f64> = m.iter().copied().collect();
        if let Some(prev) = &self.prev_update {
            if let Some(j) = update_jitter(&flat, prev) {
                self.jitter_sum += j;
                self.jitter_count += 1;
            }
        }
        self.prev_update = Some(flat);
    }

    /// Flattened most recent update (`[dA | dB^T]`, row-major).
    pub fn last_update(&self) -> Option<&[f64]> {
        self.prev_update.as_deref()
    }

    pub fn observe_covariance(&mut self, a_cov: &SymMatrix) {
        self.cov_window.push(a_cov.clone());
    }

    /// Starts a new update window (called at each reprojection event).
    pub fn reset_update_window(&mut self) {
        self.update_cov.fill(0.0);
        self.update_sum.fill(0.0);
        self.update_steps = 0;
    }

    pub fn record(&mut self, ctx: RecordContext<'_>) -> Result<GeometryRecord> {
        let r = self.rank;
        let update_decomp = if self.update_steps > 0 {
            Some(sym_eig(&SymMatrix::named(
                "update_cov",
                &self.update_cov / self.update_steps as f64,
            )?)?)
        } else {
            None
        };
        let r_eff = match &update_decomp {
            Some(d) => effective_rank(d.eigenvalues.as_slice().expect("contiguous"), ctx.eta).k,
            None => 1,
        }
        .clamp(1, r);

        let k_align = ctx.k_selected.min(r_eff).max(1);
        let fisher_k = ctx.fisher_vectors.slice(s![.., ..k_align]).to_owned();
        let rho_align = match &update_decomp {
            Some(d) => alignment_overlap(&fisher_k, &d.top_vectors(k_align))?,
            None => 0.0,
        };
        let fisher_proj = Projector::from_basis(
            ctx.fisher_vectors.slice(s![.., ..ctx.k_selected.clamp(1, r)]).to_owned(),
        );
        let pi_proj = retained_mass_matrix(&fisher_proj, &self.update_sum).unwrap_or(0.0);

        let delta_w = ctx.adapter.delta_w();
        let tail = tail_mass(delta_w.as_slice().expect("contiguous"), ctx.tail_threshold);

        let curvature = match ctx.hessian_block {
            Some(h) => orthogonal_projector_exposure(h, &adapter_tangent_projector(ctx.adapter)?)?,
            None => 0.0,
        };

        let drift = match &self.prev_fisher_basis {
            Some(prev) => {
                let k = prev.ncols().min(fisher_k.ncols());
                subspace_drift(
                    &prev.slice(s![.., ..k]).to_owned(),
                    &fisher_k.slice(s![.., ..k]).to_owned(),
                )?
            }
            None => 0.0,
        };
        self.prev_fisher_basis = Some(fisher_k);

        let (cov_var, eig_cv) = if self.cov_window.len() >= 2 {
            let st = stability_stats(&self.cov_window, ctx.k_selected.clamp(1, r))?;
            (st.cov_var, st.eig_cv)
        } else {
            (0.0, 0.0)
        };
        self.cov_window.clear();
        let jitter = if self.jitter_count > 0 {
            self.jitter_sum / self.jitter_count as f64
        } else {
            0.0
        };
        self.jitter_sum = 0.0;
        self.jitter_count = 0;

        Ok(GeometryRecord {
            step: ctx.step,
            layer: ctx.layer,
            k_selected: ctx.k_selected,
            r_eff,
            rho_align,
            pi_proj,
            tail_mass: tail,
            curvature_exposure: curvature,
            jitter,
            subspace_drift: drift,
            eig_cv,
            cov_var,
            spectrum: ctx.a_spectrum,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eig;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&[1.0, 0.0, 0.0], 0.99).k, 1);
        assert_eq!(effective_rank(&[1.0, 1.0, 1.0, 1.0], 0.5).k, 2);
        assert_eq!(effective_rank(&[4.0, 3.0, 2.0, 1.0], 0.9).k, 3);
        let z = effective_rank(&[0.0, 0.0], 0.9);
        assert!(z.degenerate && z.k == 1);
    }

    #[test]
    fn tail_mass_examples() {
        assert_eq!(tail_mass(&[0.0; 4], 0.1), 0);
        assert_eq!(tail_mass(&[0.5, -0.2], 1.0), 0);
        assert_eq!(tail_mass(&[0.1, 2.0, -3.0], 1.0), 2);
    }

    #[test]
    fn alignment_examples() {
        let e1 = array![[1.0], [0.0]];
        let e2 = array![[0.0], [1.0]];
        assert!((alignment_overlap(&e1, &e1).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(alignment_overlap(&e1, &e2).unwrap(), 0.0);
        let diag = array![[1.0], [1.0]] / 2f64.sqrt();
        assert!((alignment_overlap(&e1, &diag).unwrap() - 0.5).abs() < 1e-15);
        let bad = array![[2.0], [0.0]];
        assert!(matches!(alignment_overlap(&e1, &bad), Err(GritError::Validation(_))));
    }

    #[test]
    fn retained_mass_examples() {
        let full = Projector::from_basis(Array2::eye(2));
        assert_eq!(retained_mass(&full, &array![3.0, 4.0]), Some(1.0));
        let e1 = Projector::from_basis(array![[1.0], [0.0]]);
        assert_eq!(retained_mass(&e1, &array![0.0, 4.0]), Some(0.0));
        assert!((retained_mass(&e1, &array![3.0, 4.0]).unwrap() - 9.0 / 25.0).abs() < 1e-15);
        assert_eq!(retained_mass(&e1, &array![0.0, 0.0]), None);
    }

    #[test]
    fn curvature_exposure_examples() {
        let h = SymMatrix::from_diag(&[5.0, 1.0]).unwrap();
        assert_eq!(curvature_exposure(&h, &Array2::zeros((2, 2))).unwrap(), 0.0);
        assert_eq!(curvature_exposure(&h, &Array2::eye(2)).unwrap(), 6.0);
        let p = array![[0.0, 0.0], [0.0, 1.0]];
        assert_eq!(curvature_exposure(&h, &p).unwrap(), 1.0);
        assert!(curvature_exposure(&h, &Array2::eye(3)).is_err());
        assert_eq!(orthogonal_projector_exposure(&h, &p).unwrap(), 1.0);
    }

    #[test]
    fn jitter_examples() {
        assert!(update_jitter(&[1.0, 2.0], &[1.0, 2.0]).unwrap() < 1e-15);
        assert!((update_jitter(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() - 2.0).abs() < 1e-15);
        let s = 1.0 / 2f64.sqrt();
        let j = update_jitter(&[1.0, 0.0], &[s, s]).unwrap();
        assert!((j - (1.0 - 2f64.sqrt() / 2.0)).abs() < 1e-15);
        assert_eq!(update_jitter(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn drift_examples() {
        let e1 = array![[1.0], [0.0]];
        let e2 = array![[0.0], [1.0]];
        assert_eq!(subspace_drift(&e1, &e1).unwrap(), 0.0);
        assert_eq!(subspace_drift(&e1, &e2).unwrap(), 1.0);
        let diag = array![[1.0], [1.0]] / 2f64.sqrt();
        assert!((subspace_drift(&e1, &diag).unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn stability_examples() {
        let c = SymMatrix::new(array![[2.0, 0.5], [0.5, 1.0]]).unwrap();
        let st = stability_stats(&[c.clone(), c.clone(), c.clone()], 2).unwrap();
        assert_eq!((st.cov_var, st.eig_cv), (0.0, 0.0));

        let one = SymMatrix::from_diag(&[1.0]).unwrap();
        let three = SymMatrix::from_diag(&[3.0]).unwrap();
        let st = stability_stats(&[one.clone(), three.clone(), one, three], 1).unwrap();
        assert!((st.cov_var - 1.0).abs() < 1e-15);
        assert!((st.eig_cv - 0.5).abs() < 1e-15);

        // repeated matrix plus one perturbed copy, checked by a two-pass computation
        let base = array![[2.0, 0.3], [0.3, 1.0]];
        let pert = array![[2.4, 0.3], [0.3, 0.8]];
        let seq: Vec<SymMatrix> = [&base, &base, &base, &pert]
            .iter()
            .map(|m| SymMatrix::new((*m).clone()).unwrap())
            .collect();
        let st = stability_stats(&seq, 1).unwrap();
        let mean = (&base * 3.0 + &pert) / 4.0;
        let expect_var = (3.0 * (&base - &mean).iter().map(|v| v * v).sum::<f64>()
            + (&pert - &mean).iter().map(|v| v * v).sum::<f64>())
            / 4.0;
        assert!((st.cov_var - expect_var).abs() < 1e-14);
        let top = |m: &Array2<f64>| sym_eig(&SymMatrix::new(m.clone()).unwrap()).unwrap().eigenvalues[0];
        let l: Vec<f64> = vec![top(&base), top(&base), top(&base), top(&pert)];
        let m = l.iter().sum::<f64>() / 4.0;
        let sd = (l.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((st.eig_cv - sd / m).abs() < 1e-12);

        assert!(stability_stats(&seq[..1], 1).is_err());
    }

    #[test]
    fn zero_mean_eigen_is_skipped() {
        let z = SymMatrix::from_diag(&[1.0, 0.0]).unwrap();
        let st = stability_stats(&[z.clone(), z], 2).unwrap();
        assert_eq!(st.skipped, vec![1]);
    }

    #[test]
    fn xi_examples() {
        assert_eq!(xi_multiplier(3.0, 0.4, 0.9, (0.0, 0.0, 0.0)).unwrap(), 1.0);
        assert_eq!(xi_multiplier(2.0, 0.7, 0.1, (0.5, 0.0, 0.0)).unwrap(), 2.0);
        assert_eq!(xi_multiplier(4.0, 0.5, 1.0, (0.25, 1.0, 1.0)).unwrap(), 6.0);
        assert!(xi_multiplier(1.0, 1.0, 1.0, (-0.1, 0.0, 0.0)).is_err());
    }

    #[test]
    fn pca_identical_and_collinear() {
        let same = vec![array![1.0, 2.0, 3.0]; 4];
        let e = pca_export(&same).unwrap();
        assert!(e.coords.iter().all(|c| c[0] == 0.0 && c[1] == 0.0));

        let line: Vec<Array1<f64>> = (0..6).map(|i| array![1.0, 2.0, -1.0] * i as f64).collect();
        let e = pca_export(&line).unwrap();
        assert!(e.coords.iter().all(|c| c[1].abs() < 1e-9));
        assert!(e.coords.iter().any(|c| c[0].abs() > 1.0));

        assert!(pca_export(&line[..2]).is_err());
    }

    #[test]
    fn pca_matches_covariance_eig() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 40;
        let pts: Vec<Array1<f64>> = (0..n)
            .map(|_| {
                let a: f64 = rng.random_range(-3.0..3.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                let c: f64 = rng.random_range(-0.2..0.2);
                array![a + b, a - b, c]
            })
            .collect();
        let e = pca_export(&pts).unwrap();
        assert!(e.explained[0] >= e.explained[1]);
        let mut x = Array2::zeros((n, 3));
        for (i, p) in pts.iter().enumerate() {
            x.row_mut(i).assign(p);
        }
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        let xc = &x - &mean;
        let cov = SymMatrix::new(xc.t().dot(&xc) / (n - 1) as f64).unwrap();
        let d = sym_eig(&cov).unwrap();
        assert!((e.explained[0] - d.eigenvalues[0]).abs() < 1e-9);
        assert!((e.explained[1] - d.eigenvalues[1]).abs() < 1e-9);
        // coordinates agree with projection on covariance eigenvectors up to sign
        for c in 0..2 {
            let proj = xc.dot(&d.eigenvectors.column(c));
            let sign = if proj[0] * e.coords[0][c] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..n {
                assert!((proj[i] * sign - e.coords[i][c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn tangent_projector_is_projector_and_contains_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let adapter = AdapterPair {
            a: Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0)),
            b: Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0)),
            scaling: 1.0,
        };
        let p = adapter_tangent_projector(&adapter).unwrap();
        assert!(frobenius(&(p.dot(&p) - &p)) < 1e-9);
        assert!(frobenius(&(&p - &p.t())) < 1e-12);
        // dim = d_out * rank(A) + (d_in - rank(A)) * rank(B) = 3*2 + 2*2
        assert!((p.diag().sum() - 10.0).abs() < 1e-9);
        let dw = adapter.delta_w();
        let v = Array1::from_iter(dw.iter().copied());
        assert!((p.dot(&v) - &v).iter().all(|e| e.abs() < 1e-9));
    }

    #[test]
    fn jsonl_round_trip() {
        let rec = GeometryRecord {
            step: 3,
            layer: 1,
            k_selected: 2,
            r_eff: 2,
            rho_align: 0.5,
            pi_proj: 0.25,
            tail_mass: 7,
            curvature_exposure: 1.5,
            jitter: 0.1,
            subspace_drift: 0.2,
            eig_cv: 0.3,
            cov_var: 0.4,
            spectrum: vec![2.0, 1.0],
        };
        let mut w = JsonlWriter::new(Vec::new(), TELEMETRY_SCHEMA).unwrap();
        w.append(&rec).unwrap();
        let bytes = w.finish().unwrap();
        let back: Vec<GeometryRecord> = read_jsonl(bytes.as_slice(), TELEMETRY_SCHEMA).unwrap();
        assert_eq!(back, vec![rec]);
        assert!(read_jsonl::<GeometryRecord, _>(bytes.as_slice(), "other").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn random_basis(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
            let g = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
            let d = sym_eig(&SymMatrix::new(g.dot(&g.t())).unwrap()).unwrap();
            d.top_vectors(k)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn ranges_hold(seed in any::<u64>(), n in 2usize..=8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let k = rng.random_range(1..=n);
                let u = random_basis(&mut rng, n, k);
                let v = random_basis(&mut rng, n, k);
                let rho = alignment_overlap(&u, &v).unwrap();
                prop_assert!((-1e-9..=1.0 + 1e-9).contains(&rho));
                let drift = subspace_drift(&u, &v).unwrap();
                prop_assert!(drift >= 0.0 && drift <= (k as f64).sqrt() + 1e-9);
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let j = update_jitter(&x, &y).unwrap();
                prop_assert!((0.0..=2.0).contains(&j));
                let dw = Array1::from(x);
                let pi = retained_mass(&Projector::from_basis(u.clone()), &dw).unwrap();
                prop_assert!((0.0..=1.0).contains(&pi));
                // constructive: an update inside the span is fully retained
                let inside = u.dot(&Array1::from_shape_fn(k, |i| (i + 1) as f64));
                let full = retained_mass(&Projector::from_basis(u), &inside).unwrap();
                prop_assert!((full - 1.0).abs() < 1e-9);
            }

            #[test]
            fn effective_rank_monotone(seed in any::<u64>(), n in 1usize..=10) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut eig: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                eig.sort_by(|a, b| b.total_cmp(a));
                let ks: Vec<usize> = [0.2, 0.5, 0.8, 0.9, 0.99, 1.0].iter().map(|&e| effective_rank(&eig, e).k).collect();
                prop_assert!(ks.windows(2).all(|w| w[0] <= w[1]));
            }

            #[test]
            fn exposure_bounded_by_trace(seed in any::<u64>(), n in 1usize..=8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
                let h = SymMatrix::new(g.dot(&g.t())).unwrap();
                let k = rng.random_range(1..=n);
                let p = random_basis(&mut rng, n, k);
                let pm = p.dot(&p.t());
                let exp = curvature_exposure(&h, &pm).unwrap();
                prop_assert!(exp <= h.trace() + 1e-9 * h.trace().max(1.0));
                let fast = orthogonal_projector_exposure(&h, &pm).unwrap();
                prop_assert!((fast - exp).abs() <= 1e-9 * h.trace().max(1.0));
            }
        }
    }
}
