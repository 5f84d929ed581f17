//! Brute-force oracle suites runnable from the command line.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GritError, Result};
use crate::forgetting::{fit_baseline_law, fit_xi_coefficients, predict, Geometry, LawSample, ScalingFit};
use crate::linalg::{cholesky, cholesky_solve, frobenius, kron, kron_matvec, sym_eig, vec_cols, SymMatrix};
use crate::model::{mse_loss, Activation, BaseLayer, Model};
use crate::reprojection::{make_projector, select_rank};
use crate::telemetry::{adapter_tangent_projector, effective_rank};
use crate::trainer::curvature_penalty;

pub const SUITES: [&str; 6] = ["kron", "eig", "projector", "gradcheck", "rankselect", "fitlaw"];

const SEED: u64 = 0x6f72_6163;

/// One comparison: passes when `observed <= tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub observed: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    fn new(name: impl Into<String>, observed: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            observed,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.observed <= self.tolerance
    }
}

pub fn run_suite(name: &str) -> Result<Vec<OracleCheck>> {
    match name {
        "kron" => kron_suite(),
        "eig" => eig_suite(),
        "projector" => projector_suite(),
        "gradcheck" => gradcheck_suite(),
        "rankselect" => rankselect_suite(),
        "fitlaw" => fitlaw_suite(),
        other => Err(GritError::Validation(format!(
            "unknown oracle suite `{other}` (expected one of {})",
            SUITES.join(", ")
        ))),
    }
}

fn rng(salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(SEED ^ salt)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    let m = gaussian(rng, n, n + 2);
    let mut s = m.dot(&m.t()) / (n + 2) as f64;
    for i in 0..n {
        s[[i, i]] += 0.1;
    }
    SymMatrix::new(s).expect("symmetric by construction")
}

fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    let m = gaussian(rng, n, n);
    SymMatrix::new((&m + &m.t()) * 0.5).expect("symmetric by construction")
}

fn rel(err: f64, scale: f64) -> f64 {
    err / scale.max(1e-300)
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn kron_suite() -> Result<Vec<OracleCheck>> {
    let mut rng = rng(1);
    let mut out = Vec::new();
    let mut matvec = 0.0f64;
    let mut inverse = 0.0f64;
    for &(p, q) in &[(2, 3), (3, 3), (4, 2), (5, 4)] {
        let left = random_spd(&mut rng, p);
        let right = random_spd(&mut rng, q);
        let m = gaussian(&mut rng, p, q);
        let fast = vec_cols(&kron_matvec(&left, &right, &m)?);
        let dense = kron(right.as_array(), left.as_array()).dot(&vec_cols(&m));
        matvec = matvec.max(rel((&fast - &dense).mapv(f64::abs).sum(), dense.mapv(f64::abs).sum()));

        let inv = |s: &SymMatrix| -> Result<Array2<f64>> {
            let l = cholesky(s.as_array()).ok_or(GritError::Singular { multiplier: 1.0 })?;
            Ok(cholesky_solve(&l, &Array2::eye(s.dim())))
        };
        let fast_inv = left_inv_apply(&inv(&left)?, &inv(&right)?, &m);
        let big = kron(right.as_array(), left.as_array());
        let l = cholesky(&big).ok_or(GritError::Singular { multiplier: 1.0 })?;
        let rhs = vec_cols(&m).insert_axis(ndarray::Axis(1));
        let solved = cholesky_solve(&l, &rhs).column(0).to_owned();
        let fast_vec = vec_cols(&fast_inv);
        inverse = inverse.max(rel((&fast_vec - &solved).mapv(f64::abs).sum(), solved.mapv(f64::abs).sum()));
    }
    out.push(OracleCheck::new("kron_matvec vs explicit Kronecker product", matvec, 1e-12));
    out.push(OracleCheck::new("factored inverse vs dense Kronecker solve", inverse, 1e-9));

    let mut penalty = 0.0f64;
    for trial in 0..4 {
        let (d_in, d_out, r, n) = (3 + trial, 4, 2, 5 + trial);
        let base = BaseLayer::new(gaussian(&mut rng, d_out, d_in), None, Activation::Identity)?;
        let mut model = Model::new(vec![base], r, 0.5, &mut rng)?;
        model.adapter_mut(0).b = gaussian(&mut rng, d_out, r);
        let x = gaussian(&mut rng, n, d_in);
        let t = gaussian(&mut rng, n, d_out);
        let pred = model.forward(&x)?;
        let tapes = model.backward(&mse_loss(&pred, &t).1)?;
        let fast = curvature_penalty(&tapes, &[model.adapter(0)])?;
        let dw: Array1<f64> = model.adapter(0).delta_w().iter().copied().collect();
        let mut brute = 0.0;
        for i in 0..n {
            let g = tapes[0].dy.row(i).to_owned() * n as f64;
            let xi = x.row(i).to_owned();
            let gg = g.clone().insert_axis(ndarray::Axis(1)).dot(&g.clone().insert_axis(ndarray::Axis(0)));
            let xx = xi.clone().insert_axis(ndarray::Axis(1)).dot(&xi.clone().insert_axis(ndarray::Axis(0)));
            brute += dw.dot(&kron(&gg, &xx).dot(&dw));
        }
        brute /= n as f64;
        penalty = penalty.max(rel((fast - brute).abs(), brute.abs()));
    }
    out.push(OracleCheck::new("curvature penalty vs per-sample Kronecker quadratic", penalty, 1e-10));
    Ok(out)
}

fn left_inv_apply(inv_left: &Array2<f64>, inv_right: &Array2<f64>, m: &Array2<f64>) -> Array2<f64> {
    inv_left.dot(m).dot(inv_right)
}

fn eig_suite() -> Result<Vec<OracleCheck>> {
    let mut rng = rng(2);
    let (mut recon, mut ortho, mut order, mut trace) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for n in 1..=8 {
        for _ in 0..3 {
            let m = random_sym(&mut rng, n);
            let d = sym_eig(&m)?;
            recon = recon.max(rel(frobenius(&(d.reconstruct() - m.as_array())), frobenius(m.as_array())));
            let g = d.eigenvectors.t().dot(&d.eigenvectors) - Array2::<f64>::eye(n);
            ortho = ortho.max(max_abs(&g));
            for w in d.eigenvalues.windows(2) {
                order = order.max(w[1] - w[0]);
            }
            trace = trace.max((d.eigenvalues.sum() - m.trace()).abs() / m.as_array().mapv(f64::abs).sum());
        }
    }
    let mut closed = 0.0f64;
    for _ in 0..20 {
        let (a, b, c): (f64, f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c).powi(2) + b * b).sqrt();
        let d = sym_eig(&SymMatrix::new(ndarray::array![[a, b], [b, c]])?)?;
        closed = closed.max((d.eigenvalues[0] - (mid + rad)).abs().max((d.eigenvalues[1] - (mid - rad)).abs()));
    }
    Ok(vec![
        OracleCheck::new("reconstruction V diag(l) V^T", recon, 1e-10),
        OracleCheck::new("eigenvector orthonormality", ortho, 1e-10),
        OracleCheck::new("descending order violation", order, 0.0),
        OracleCheck::new("trace equals eigenvalue sum", trace, 1e-12),
        OracleCheck::new("2x2 closed form", closed, 1e-12),
    ])
}

fn projector_suite() -> Result<Vec<OracleCheck>> {
    let mut rng = rng(3);
    let (mut idem, mut sym, mut expand, mut trace_gap) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for r in 2..=8 {
        let cov = random_spd(&mut rng, r);
        let decomp = sym_eig(&cov)?;
        for k in 1..=r {
            let p = make_projector(&decomp, k)?.matrix();
            idem = idem.max(max_abs(&(p.dot(&p) - &p)));
            sym = sym.max(max_abs(&(&p - &p.t())));
            for _ in 0..5 {
                let v: Array1<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
                let pv = p.dot(&v);
                expand = expand.max(pv.dot(&pv).sqrt() - v.dot(&v).sqrt());
            }
            let h = random_spd(&mut rng, r);
            let php = p.dot(h.as_array()).dot(&p);
            trace_gap = trace_gap.max(php.diag().sum() - h.trace());
        }
    }
    let mut tangent = 0.0f64;
    for trial in 0..3 {
        let base = BaseLayer::new(gaussian(&mut rng, 4, 3 + trial), None, Activation::Identity)?;
        let mut model = Model::new(vec![base], 2, 1.0, &mut rng)?;
        model.adapter_mut(0).b = gaussian(&mut rng, 4, 2);
        let p = adapter_tangent_projector(model.adapter(0))?;
        tangent = tangent.max(max_abs(&(p.dot(&p) - &p)).max(max_abs(&(&p - &p.t()))));
    }
    Ok(vec![
        OracleCheck::new("idempotence |P^2 - P|", idem, 1e-12),
        OracleCheck::new("symmetry |P - P^T|", sym, 1e-12),
        OracleCheck::new("non-expansiveness |Pv| - |v|", expand.max(0.0), 1e-12),
        OracleCheck::new("trace inequality tr(PHP) - tr(H)", trace_gap.max(0.0), 1e-12),
        OracleCheck::new("adapter tangent projector idempotent and symmetric", tangent, 1e-10),
    ])
}

fn loss_of(model: &Model, x: &Array2<f64>, t: &Array2<f64>) -> Result<f64> {
    Ok(mse_loss(&model.predict(x)?, t).0)
}

fn gradcheck_suite() -> Result<Vec<OracleCheck>> {
    let mut rng = rng(4);
    let shapes: [(&[usize], Activation); 3] = [
        (&[4, 3], Activation::Identity),
        (&[4, 5, 3], Activation::Tanh),
        (&[3, 6, 4, 2], Activation::Tanh),
    ];
    let h = 1e-6;
    let mut out = Vec::new();
    for (dims, act) in shapes {
        let mut bases = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let last = i + 2 == dims.len();
            let w0 = gaussian(&mut rng, w[1], w[0]) / (w[0] as f64).sqrt();
            let bias = Array1::from_shape_simple_fn(w[1], || 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
            bases.push(BaseLayer::new(w0, Some(bias), if last { Activation::Identity } else { act })?);
        }
        let mut model = Model::new(bases, 2, 0.5, &mut rng)?;
        for l in 0..model.num_layers() {
            let shape = model.adapter(l).b.dim();
            model.adapter_mut(l).b = gaussian(&mut rng, shape.0, shape.1) * 0.3;
        }
        let x = gaussian(&mut rng, 6, dims[0]);
        let t = gaussian(&mut rng, 6, dims[dims.len() - 1]);
        let pred = model.forward(&x)?;
        let tapes = model.backward(&mse_loss(&pred, &t).1)?;
        let mut worst = 0.0f64;
        for l in 0..model.num_layers() {
            for which in 0..2 {
                let analytic = if which == 0 { &tapes[l].grad_a } else { &tapes[l].grad_b };
                for ((i, j), &an) in analytic.indexed_iter() {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    if which == 0 {
                        plus.adapter_mut(l).a[[i, j]] += h;
                        minus.adapter_mut(l).a[[i, j]] -= h;
                    } else {
                        plus.adapter_mut(l).b[[i, j]] += h;
                        minus.adapter_mut(l).b[[i, j]] -= h;
                    }
                    let fd = (loss_of(&plus, &x, &t)? - loss_of(&minus, &x, &t)?) / (2.0 * h);
                    worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-4));
                }
            }
        }
        let name = format!("{:?} {:?}: max relative error", dims, act).to_lowercase();
        out.push(OracleCheck::new(name, worst, 1e-6));
    }
    Ok(out)
}

fn brute_prefix(eigenvalues: &[f64], tau: f64) -> usize {
    let total: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    (1..=eigenvalues.len())
        .find(|&k| eigenvalues[..k].iter().map(|v| v.max(0.0)).sum::<f64>() >= tau * total)
        .unwrap_or(eigenvalues.len())
}

fn rankselect_suite() -> Result<Vec<OracleCheck>> {
    let mut rng = rng(5);
    let (mut select_bad, mut reff_bad, mut cases) = (0usize, 0usize, 0usize);
    for r in 1..=10 {
        for _ in 0..40 {
            let decay: f64 = rng.random_range(0.1..1.0);
            let mut spec: Vec<f64> = (0..r).map(|i| decay.powi(i as i32) * rng.random_range(0.5..1.5)).collect();
            spec.sort_by(|a, b| b.total_cmp(a));
            let tau: f64 = rng.random_range(0.05..1.0);
            let min_rank = rng.random_range(1..=r);
            let want = brute_prefix(&spec, tau);
            if select_rank(&spec, tau, min_rank).k != want.clamp(min_rank, r) {
                select_bad += 1;
            }
            if effective_rank(&spec, tau).k != want {
                reff_bad += 1;
            }
            cases += 1;
        }
    }
    let zero_ok = select_rank(&[0.0; 4], 0.9, 2).k == 2 && effective_rank(&[0.0; 4], 0.9).k == 1;
    Ok(vec![
        OracleCheck::new(format!("select_rank mismatches over {cases} spectra"), select_bad as f64, 0.0),
        OracleCheck::new(format!("effective_rank mismatches over {cases} spectra"), reff_bad as f64, 0.0),
        OracleCheck::new("zero spectrum falls back to the floor", if zero_ok { 0.0 } else { 1.0 }, 0.0),
    ])
}

fn fitlaw_suite() -> Result<Vec<OracleCheck>> {
    let truth = ScalingFit {
        c0: 1.5,
        a_coef: 2.0,
        alpha: 0.35,
        beta: 0.4,
        gamma_r: 0.0,
        gamma_a: 0.0,
        gamma_p: 0.0,
        residual_rms: 0.0,
        unidentifiable: vec![],
    };
    let mut samples = Vec::new();
    for &n in &[3e3, 3e4, 3e5] {
        for i in 0..4 {
            let d = 500.0 * 4f64.powi(i);
            samples.push(LawSample {
                d_ft: d,
                n_params: n,
                pt_loss: predict(&truth, d, n, None),
                geometry: None,
            });
        }
    }
    let fit = fit_baseline_law(&samples)?;
    let param_err = [
        (fit.c0, truth.c0),
        (fit.a_coef, truth.a_coef),
        (fit.alpha, truth.alpha),
        (fit.beta, truth.beta),
    ]
    .iter()
    .map(|(g, w)| ((g - w) / w).abs())
    .fold(0.0, f64::max);

    let mut with_gamma = truth.clone();
    with_gamma.gamma_r = 0.15;
    with_gamma.gamma_a = 0.6;
    with_gamma.gamma_p = 0.25;
    let mut rng = rng(6);
    let geo: Vec<LawSample> = samples
        .iter()
        .map(|s| {
            let g = Geometry {
                r_eff: rng.random_range(1.0..8.0),
                rho_align: rng.random_range(0.0..1.0),
                pi_proj: rng.random_range(0.0..1.0),
            };
            LawSample {
                pt_loss: predict(&with_gamma, s.d_ft, s.n_params, Some(&g)),
                geometry: Some(g),
                ..s.clone()
            }
        })
        .collect();
    let xi = fit_xi_coefficients(&geo, &truth)?;
    let gamma_err = [
        (xi.gamma_r, with_gamma.gamma_r),
        (xi.gamma_a, with_gamma.gamma_a),
        (xi.gamma_p, with_gamma.gamma_p),
    ]
    .iter()
    .map(|(g, w)| ((g - w) / w).abs())
    .fold(0.0, f64::max);
    Ok(vec![
        OracleCheck::new("baseline residual rms on noiseless law", fit.residual_rms, 1e-6),
        OracleCheck::new("baseline parameter relative error", param_err, 1e-4),
        OracleCheck::new("geometry coefficient relative error", gamma_err, 1e-3),
    ])
}
