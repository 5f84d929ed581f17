//! Brute-force reference implementations shared by the integration tests.
//! Nothing here calls into the crate's linear algebra.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// `G G^T / cols + shift I` with `G` Gaussian.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Array2<f64> {
    let g = gaussian(rng, n, n + 3);
    let mut s = g.dot(&g.t()) / (n + 3) as f64;
    for i in 0..n {
        s[[i, i]] += shift;
    }
    s
}

/// Random PSD matrix of rank at most `rank`.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> Array2<f64> {
    let g = gaussian(rng, n, rank);
    g.dot(&g.t())
}

pub fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| a[[i / br, j / bc]] * b[[i % br, j % bc]])
}

/// Column-major vectorization.
pub fn vec_cols(m: &Array2<f64>) -> Array1<f64> {
    let (r, c) = m.dim();
    Array1::from_shape_fn(r * c, |k| m[[k % r, k / r]])
}

pub fn unvec_cols(v: &Array1<f64>, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| v[j * rows + i])
}

/// Gaussian elimination with partial pivoting.
pub fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .unwrap();
        if piv != col {
            for k in 0..n {
                m.swap([col, k], [piv, k]);
            }
            x.swap(col, piv);
        }
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            if f != 0.0 {
                for k in col..n {
                    m[[row, k]] -= f * m[[col, k]];
                }
                x[row] -= f * x[col];
            }
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for k in row + 1..n {
            acc -= m[[row, k]] * x[k];
        }
        x[row] = acc / m[[row, row]];
    }
    x
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = if i == j { s.sqrt() } else { s / l[[j, j]] };
        }
    }
    l
}

/// Five-point central difference of `f` at `x` along coordinate `(i, j)`.
pub fn fd5<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>, i: usize, j: usize, h: f64) -> f64 {
    let at = |d: f64| {
        let mut y = x.clone();
        y[[i, j]] += d;
        f(&y)
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

/// Smallest `k` with prefix fraction `sum_{i<k} l_i / sum l_i >= tau`, scanning every prefix.
pub fn prefix_scan(eigenvalues: &[f64], tau: f64) -> Option<usize> {
    let clipped: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    for k in 1..=clipped.len() {
        let prefix: f64 = clipped[..k].iter().sum();
        if prefix / total >= tau {
            return Some(k);
        }
    }
    Some(clipped.len())
}

/// Descending spectrum with a random shape: geometric decay, plateaus and exact zeros.
pub fn random_spectrum(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=16);
    let mut v: Vec<f64> = match rng.random_range(0..4) {
        0 => {
            let decay: f64 = rng.random_range(0.05..1.0);
            (0..n).map(|i| decay.powi(i as i32)).collect()
        }
        1 => (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        2 => {
            let k = rng.random_range(1..=n);
            (0..n).map(|i| if i < k { 1.0 } else { 0.0 }).collect()
        }
        _ => (0..n).map(|_| rng.random_range(0.0f64..1.0).powi(4) * 100.0).collect(),
    };
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
