//! Gaussian-process marginal likelihood and posterior prediction.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::grammar::KernelExpr;
use super::kernel::kernel_matrix;
use crate::ad::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Diagonal jitter schedule tried in order when a Cholesky factorization fails.
pub const JITTER: [f64; 6] = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// Cholesky factor of `a + jitter·I` for the first jitter that succeeds.
pub fn jittered_cholesky(a: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if !a.iter().all(|v| v.is_finite()) {
        return None;
    }
    JITTER.iter().find_map(|&j| {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += j;
        }
        m.cholesky().map(|c| (c, j))
    })
}

fn check_signal(y: &[f64], t: &[f64]) -> Result<()> {
    if y.len() != t.len() {
        return Err(Error::LengthMismatch(t.len(), y.len()));
    }
    if y.is_empty() {
        return Err(Error::Data("empty signal".into()));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("signal value {i} is not finite")));
    }
    Ok(())
}

fn check_params(expr: &KernelExpr, raw: &[f64]) -> Result<()> {
    if raw.len() != expr.num_params() {
        return Err(Error::LengthMismatch(expr.num_params(), raw.len()));
    }
    Ok(())
}

/// Factorized `K + σ²I` with `α = (K + σ²I)⁻¹ y`.
struct Fit {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    value: f64,
    l_inv: OnceLock<DMatrix<f64>>,
    inv: OnceLock<DMatrix<f64>>,
}

impl Fit {
    /// `L⁻¹`, filled column by column below the diagonal only.
    fn l_inv(&self) -> &DMatrix<f64> {
        self.l_inv.get_or_init(|| {
            // Column i of the transpose is row i of L, contiguous in memory.
            let lt = self.chol.l_dirty().transpose();
            let n = lt.nrows();
            let rows = lt.as_slice();
            let mut out = DMatrix::zeros(n, n);
            for j in 0..n {
                let col = &mut out.as_mut_slice()[j * n..(j + 1) * n];
                col[j] = 1.0 / rows[j * n + j];
                for i in j + 1..n {
                    let row = &rows[i * n..(i + 1) * n];
                    let acc: f64 = row[j..i].iter().zip(&col[j..i]).map(|(a, b)| a * b).sum();
                    col[i] = -acc / row[i];
                }
            }
            out
        })
    }

    fn inv(&self) -> &DMatrix<f64> {
        self.inv.get_or_init(|| {
            let li = self.l_inv();
            li.transpose() * li
        })
    }

    /// `tr (K + σ²I)⁻¹ = ‖L⁻¹‖²_F`.
    fn inv_trace(&self) -> f64 {
        match self.inv.get() {
            Some(inv) => inv.trace(),
            None => self.l_inv().norm_squared(),
        }
    }
}

fn fit(expr: &KernelExpr, raw: &[f64], sigma: f64, t: &[f64], y: &[f64]) -> Option<Fit> {
    let mut a = kernel_matrix(expr, raw, t, t, false).value;
    for i in 0..t.len() {
        a[(i, i)] += sigma * sigma;
    }
    let (chol, _) = jittered_cholesky(&a)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let log_det: f64 = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
        * 2.0;
    let n = y.len() as f64;
    let value = -0.5 * yv.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * PI).ln();
    value.is_finite().then(|| Fit {
        chol,
        alpha,
        value,
        l_inv: OnceLock::new(),
        inv: OnceLock::new(),
    })
}

/// `log N(y; 0, K + σ²I)`; `-inf` when no jitter level admits a factorization.
pub fn gp_log_marginal(
    expr: &KernelExpr,
    raw: &[f64],
    sigma: f64,
    t: &[f64],
    y: &[f64],
) -> Result<f64> {
    check_signal(y, t)?;
    check_params(expr, raw)?;
    Ok(fit(expr, raw, sigma, t, y).map_or(f64::NEG_INFINITY, |f| f.value))
}

/// Value and gradients of [`gp_log_marginal`].
#[derive(Clone, Debug)]
pub struct GpGradient {
    pub value: f64,
    pub d_sigma: f64,
    /// With respect to the raw kernel parameters.
    pub d_raw: Vec<f64>,
}

fn d_sigma(f: &Fit, sigma: f64) -> f64 {
    sigma * (f.alpha.dot(&f.alpha) - f.inv_trace())
}

fn d_raw(f: &Fit, expr: &KernelExpr, raw: &[f64], t: &[f64]) -> Vec<f64> {
    let inv = f.inv();
    let km = kernel_matrix(expr, raw, t, t, true);
    let mut out = vec![0.0; raw.len()];
    for (p, dk) in &km.grads {
        let quad = (dk * &f.alpha).dot(&f.alpha);
        out[*p] = 0.5 * (quad - inv.component_mul(dk).sum());
    }
    out
}

/// `None` when the marginal is `-inf`.
pub fn gp_log_marginal_grad(
    expr: &KernelExpr,
    raw: &[f64],
    sigma: f64,
    t: &[f64],
    y: &[f64],
) -> Result<Option<GpGradient>> {
    check_signal(y, t)?;
    check_params(expr, raw)?;
    Ok(fit(expr, raw, sigma, t, y).map(|f| GpGradient {
        value: f.value,
        d_sigma: d_sigma(&f, sigma),
        d_raw: d_raw(&f, expr, raw, t),
    }))
}

/// Records the marginal on `tape` with inputs `[zc, σ]`.
///
/// Gradients are computed on the backward pass and only for inputs that need
/// them, so the θ-only pass never builds kernel sensitivities.
pub fn gp_log_marginal_on_tape(
    tape: &mut Tape,
    expr: &KernelExpr,
    zc: Var,
    sigma: Var,
    t: Arc<[f64]>,
    y: Arc<[f64]>,
) -> Result<Var> {
    check_signal(&y, &t)?;
    let raw = tape.value(zc).data().to_vec();
    check_params(expr, &raw)?;
    let s = tape.value(sigma).item();
    let Some(f) = fit(expr, &raw, s, &t, &y) else {
        let back = Box::new(|_: &Tensor, _: &[bool]| vec![None, None]);
        return tape.custom(
            "gp_log_marginal",
            &[zc, sigma],
            Tensor::scalar(f64::NEG_INFINITY),
            back,
        );
    };
    let value = f.value;
    let expr = expr.clone();
    let f = Arc::new(f);
    let back = Box::new(move |g: &Tensor, need: &[bool]| {
        let g = g.item();
        let dz = need[0].then(|| {
            let d = d_raw(&f, &expr, &raw, &t);
            Tensor::vector(d.into_iter().map(|v| g * v).collect())
        });
        let ds = need[1].then(|| Tensor::scalar(g * d_sigma(&f, s)));
        vec![dz, ds]
    });
    tape.custom("gp_log_marginal", &[zc, sigma], Tensor::scalar(value), back)
}

/// Posterior predictive at query inputs.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub mean: Vec<f64>,
    /// Includes observation noise `σ²`.
    pub var: Vec<f64>,
    /// One joint draw from the predictive.
    pub sample: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn gp_predict<R: Rng + ?Sized>(
    expr: &KernelExpr,
    raw: &[f64],
    sigma: f64,
    t: &[f64],
    y: &[f64],
    t_star: &[f64],
    rng: &mut R,
) -> Result<Prediction> {
    check_signal(y, t)?;
    check_params(expr, raw)?;
    let f = fit(expr, raw, sigma, t, y)
        .ok_or_else(|| Error::Data("kernel matrix is not positive definite".into()))?;
    let ks = kernel_matrix(expr, raw, t, t_star, false).value;
    let kss = kernel_matrix(expr, raw, t_star, t_star, false).value;
    let mean = ks.transpose() * &f.alpha;
    let v = f
        .chol
        .l()
        .solve_lower_triangular(&ks)
        .expect("Cholesky factor has a nonzero diagonal");
    let mut cov = kss - v.transpose() * v;
    let m = t_star.len();
    for i in 0..m {
        cov[(i, i)] += sigma * sigma;
    }
    cov = (&cov + cov.transpose()) * 0.5;
    let var: Vec<f64> = (0..m).map(|i| cov[(i, i)].max(0.0)).collect();
    let eps = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let sample = match jittered_cholesky(&cov) {
        Some((c, _)) => &mean + c.l() * eps,
        None => DVector::from_iterator(m, (0..m).map(|i| mean[i] + var[i].sqrt() * eps[i])),
    };
    Ok(Prediction {
        mean: mean.iter().copied().collect(),
        var,
        sample: sample.iter().copied().collect(),
    })
}
