//! Dense symmetric linear algebra at rank scale.
//!
//! Everything here works on small `r x r` matrices (r <= 64 in practice) and
//! on the dense desk-scale Hessians used by the forgetting estimators. The
//! eigensolver is a cyclic Jacobi sweep: slow for large matrices but exactly
//! reproducible, which the telemetry and replay tests depend on.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{GritError, Result};

/// Multipliers applied to the base damping before giving up on a factorization.
pub const DAMPING_LADDER: [f64; 6] = [1.0, 3.0, 10.0, 30.0, 100.0, 300.0];

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// A validated, symmetrized square matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    data: Array2<f64>,
}

impl SymMatrix {
    /// Symmetrizes `data` as `(M + M^T) / 2`.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        Self::named("matrix", data)
    }

    /// Like [`SymMatrix::new`], but errors carry `name` so the caller can tell
    /// which covariance or Hessian went bad.
    pub fn named(name: &str, data: Array2<f64>) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows != cols {
            return Err(GritError::shape(format!(
                "{name} must be square, got {rows}x{cols}"
            )));
        }
        if rows == 0 {
            return Err(GritError::shape(format!("{name} has zero dimension")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GritError::Decomposition {
                name: name.to_string(),
                reason: "non-finite entries".into(),
            });
        }
        Ok(Self {
            data: symmetrize(data.view()),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            data: Array2::eye(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: Array2::zeros((dim, dim)),
        }
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        Self::new(Array2::from_diag(&Array1::from(diag.to_vec())))
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.diag().sum()
    }
}

/// Eigenvalues in non-increasing order with matching orthonormal eigenvector columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomp {
    pub eigenvalues: Array1<f64>,
    pub eigenvectors: Array2<f64>,
}

impl SpectralDecomp {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U diag(lambda) U^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.eigenvectors * &self.eigenvalues.view().insert_axis(ndarray::Axis(0));
        scaled.dot(&self.eigenvectors.t())
    }

    /// Leading `k` eigenvector columns.
    pub fn top_vectors(&self, k: usize) -> Array2<f64> {
        self.eigenvectors.slice(ndarray::s![.., ..k]).to_owned()
    }

    /// Eigenvalues with small negative round-off clipped to zero.
    pub fn clipped_eigenvalues(&self) -> Array1<f64> {
        self.eigenvalues.mapv(|v| v.max(0.0))
    }
}

pub fn symmetrize(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    out += &m.t();
    out *= 0.5;
    out
}

pub fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvalues are returned in non-increasing order; ties keep the original
/// diagonal order. Each eigenvector is signed so its first non-negligible
/// component is non-negative.
pub fn sym_eig(m: &SymMatrix) -> Result<SpectralDecomp> {
    let n = m.dim();
    let mut a: Vec<f64> = m.as_array().iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            diag += a[i * n + i] * a[i * n + i];
            for j in 0..n {
                if i != j {
                    off += a[i * n + j] * a[i * n + j];
                }
            }
        }
        if off.sqrt() <= JACOBI_TOL * diag.sqrt() || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(GritError::Decomposition {
            name: "matrix".into(),
            reason: format!("Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep index order
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));

    let mut eigenvalues = Array1::zeros(n);
    let mut eigenvectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        eigenvalues[col] = a[src * n + src];
        let mut sign = 1.0;
        for row in 0..n {
            let x = v[row * n + src];
            if x.abs() > 1e-14 {
                sign = if x < 0.0 { -1.0 } else { 1.0 };
                break;
            }
        }
        for row in 0..n {
            eigenvectors[[row, col]] = sign * v[row * n + src];
        }
    }
    Ok(SpectralDecomp {
        eigenvalues,
        eigenvectors,
    })
}

/// Lower-triangular Cholesky factor, or `None` if `m` is not positive definite.
pub fn cholesky(m: &Array2<f64>) -> Option<Array2<f64>> {
    let n = m.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = m[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

/// Solves `L L^T X = rhs` given the lower Cholesky factor.
pub fn cholesky_solve(l: &Array2<f64>, rhs: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = rhs.clone();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[[i, col]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = x[[i, col]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    x
}

/// Solution of a damped system plus the ladder multiplier that made it succeed.
#[derive(Debug, Clone)]
pub struct DampedSolve {
    pub x: Array2<f64>,
    pub multiplier: f64,
}

/// Solves `(m + c * damping * I) X = rhs` for the first `c` in [`DAMPING_LADDER`]
/// at which the shifted matrix admits a Cholesky factorization.
pub fn damped_solve(m: &SymMatrix, damping: f64, rhs: &Array2<f64>) -> Result<DampedSolve> {
    if damping < 0.0 || !damping.is_finite() {
        return Err(GritError::Validation(format!(
            "damping must be finite and non-negative, got {damping}"
        )));
    }
    let n = m.dim();
    if rhs.nrows() != n {
        return Err(GritError::shape(format!(
            "rhs has {} rows, matrix is {n}x{n}",
            rhs.nrows()
        )));
    }
    let mut last = DAMPING_LADDER[0];
    for &multiplier in &DAMPING_LADDER {
        last = multiplier;
        let mut shifted = m.as_array().clone();
        let shift = multiplier * damping;
        for i in 0..n {
            shifted[[i, i]] += shift;
        }
        if let Some(l) = cholesky(&shifted) {
            return Ok(DampedSolve {
                x: cholesky_solve(&l, rhs),
                multiplier,
            });
        }
    }
    Err(GritError::Singular { multiplier: last })
}

/// Returns `left * mat * right`, whose column-major vectorization equals
/// `(right kron left) vec(mat)` for symmetric `right`.
pub fn kron_matvec(left: &SymMatrix, right: &SymMatrix, mat: &Array2<f64>) -> Result<Array2<f64>> {
    if left.dim() != mat.nrows() || right.dim() != mat.ncols() {
        return Err(GritError::shape(format!(
            "kron_matvec: left {0}x{0}, mat {1}x{2}, right {3}x{3}",
            left.dim(),
            mat.nrows(),
            mat.ncols(),
            right.dim()
        )));
    }
    Ok(left.as_array().dot(mat).dot(right.as_array()))
}

/// Explicit Kronecker product `a kron b`.
pub fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[[i, j]];
            for k in 0..br {
                for l in 0..bc {
                    out[[i * br + k, j * bc + l]] = aij * b[[k, l]];
                }
            }
        }
    }
    out
}

/// Column-major vectorization.
pub fn vec_cols(m: &Array2<f64>) -> Array1<f64> {
    m.t().iter().copied().collect()
}

/// Inverse of [`vec_cols`].
pub fn unvec_cols(v: &Array1<f64>, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| v[j * rows + i])
}
