//! Classical direct ratio estimators: uLSIF, KLIEP and the logistic
//! discriminator with the inverse-odds transform.
//!
//! Kernel models use the Gaussian RBF basis
//! `phi_j(z) = exp(-|z - c_j|^2 / (2 sigma^2))`. Inputs are row batches so the
//! same code serves the scalar patch test and multi-column CSV data.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::sigmoid;
use crate::rng::Stream;

/// Subsample cap of the median heuristic.
pub const BANDWIDTH_CAP: usize = 1000;
/// Output range of [`ratio_from_discriminator`].
pub const DISCRIMINATOR_FLOOR: f64 = 1e-3;
pub const DISCRIMINATOR_CEIL: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    pub value: f64,
    /// Set when every pairwise distance was zero and 1.0 was substituted.
    pub fallback: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(batch: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    batch.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median pairwise distance over an evenly strided subsample of at most
/// [`BANDWIDTH_CAP`] rows.
pub fn median_bandwidth(batch: ArrayView2<'_, f64>) -> Result<Bandwidth> {
    let n = batch.nrows();
    if n < 2 {
        return Err(Error::InvalidConfig(format!("median bandwidth needs at least 2 points, got {n}")));
    }
    let stride = n.div_ceil(BANDWIDTH_CAP);
    let pts: Vec<Vec<f64>> = (0..n).step_by(stride).map(|i| batch.row(i).to_vec()).collect();
    let mut d = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(sq_dist(&pts[i], &pts[j]).sqrt());
        }
    }
    let m = median(&mut d);
    if m > 0.0 && m.is_finite() {
        Ok(Bandwidth { value: m, fallback: false })
    } else {
        Ok(Bandwidth { value: 1.0, fallback: true })
    }
}

/// `k` distinct rows drawn without replacement (all rows if `k >= n`).
pub fn choose_centers(batch: ArrayView2<'_, f64>, k: usize, seed: u64) -> Array2<f64> {
    let n = batch.nrows();
    if k >= n {
        return batch.to_owned();
    }
    let mut idx = Stream::new(seed).choose_indices(n, k);
    idx.sort_unstable();
    batch.select(Axis(0), &idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    pub centers: Vec<Vec<f64>>,
    pub bandwidth: f64,
    pub alpha: Vec<f64>,
    pub nonneg_clip: bool,
}

impl KernelModel {
    fn new(centers: ArrayView2<'_, f64>, bandwidth: f64, alpha: Vec<f64>, nonneg_clip: bool) -> Self {
        Self {
            centers: rows(centers),
            bandwidth,
            alpha,
            nonneg_clip,
        }
    }

    pub fn evaluate_rows(&self, batch: ArrayView2<'_, f64>) -> Vec<f64> {
        let gamma = 0.5 / (self.bandwidth * self.bandwidth);
        batch
            .rows()
            .into_iter()
            .map(|row| {
                let row = row.to_vec();
                let v: f64 = self
                    .centers
                    .iter()
                    .zip(&self.alpha)
                    .map(|(c, a)| a * (-gamma * sq_dist(&row, c)).exp())
                    .sum();
                if self.nonneg_clip {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect()
    }

    pub fn evaluate(&self, zs: &[f64]) -> Vec<f64> {
        self.evaluate_rows(ArrayView2::from_shape((zs.len(), 1), zs).unwrap())
    }
}

fn check_kernel_inputs(q: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>, bandwidth: f64) -> Result<()> {
    if q.nrows() == 0 || p.nrows() == 0 {
        return Err(Error::InvalidConfig("source and target batches must be nonempty".into()));
    }
    if centers.nrows() == 0 {
        return Err(Error::InvalidConfig("kernel model needs at least one center".into()));
    }
    if q.ncols() != centers.ncols() || p.ncols() != centers.ncols() {
        return Err(Error::LengthMismatch {
            expected: centers.ncols(),
            got: if q.ncols() != centers.ncols() { q.ncols() } else { p.ncols() },
        });
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {bandwidth}")));
    }
    Ok(())
}

/// `n x b` basis matrix.
fn design(batch: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>, bandwidth: f64) -> Array2<f64> {
    let gamma = 0.5 / (bandwidth * bandwidth);
    let cs = rows(centers);
    let mut out = Array2::zeros((batch.nrows(), cs.len()));
    for (mut o, r) in out.rows_mut().into_iter().zip(batch.rows()) {
        let r = r.to_vec();
        for (v, c) in o.iter_mut().zip(&cs) {
            *v = (-gamma * sq_dist(&r, c)).exp();
        }
    }
    out
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) {
            return Err(Error::NonFinite(format!("matrix is not positive definite at pivot {j}")));
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[[i, k]] * y[k];
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[[k, i]] * y[k];
        }
        y[i] /= l[[i, i]];
    }
    y
}

/// The regularized uLSIF normal equations `(H + lambda I) alpha = h`.
#[derive(Debug, Clone)]
pub struct UlsifSystem {
    pub h_mat: Array2<f64>,
    pub h_vec: Array1<f64>,
    pub lambda: f64,
}

impl UlsifSystem {
    pub fn build(q: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>, bandwidth: f64, lambda: f64) -> Result<Self> {
        check_kernel_inputs(q, p, centers, bandwidth)?;
        if !(lambda > 0.0) {
            return Err(Error::InvalidConfig(format!("uLSIF regularization must be positive, got {lambda}")));
        }
        let phi_q = design(q, centers, bandwidth);
        let phi_p = design(p, centers, bandwidth);
        let h_mat = phi_q.t().dot(&phi_q) / q.nrows() as f64;
        let h_vec = phi_p.mean_axis(Axis(0)).unwrap();
        Ok(Self { h_mat, h_vec, lambda })
    }

    fn regularized(&self) -> Array2<f64> {
        let mut a = self.h_mat.clone();
        for i in 0..a.nrows() {
            a[[i, i]] += self.lambda;
        }
        a
    }

    pub fn solve(&self) -> Result<Vec<f64>> {
        let l = cholesky(&self.regularized())?;
        Ok(cholesky_solve(&l, self.h_vec.as_slice().unwrap()))
    }

    /// `||(H + lambda I) alpha - h||_2`.
    pub fn residual(&self, alpha: &[f64]) -> f64 {
        let a = self.regularized().dot(&Array1::from(alpha.to_vec()));
        (a - &self.h_vec).mapv(|x| x * x).sum().sqrt()
    }

    /// `1/2 a'Ha - h'a + lambda/2 |a|^2`.
    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let a = Array1::from(alpha.to_vec());
        0.5 * a.dot(&self.h_mat.dot(&a)) - self.h_vec.dot(&a) + 0.5 * self.lambda * a.dot(&a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UlsifReport {
    pub normal_residual: f64,
    pub objective: f64,
}

pub fn fit_ulsif(
    q: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
    centers: ArrayView2<'_, f64>,
    bandwidth: f64,
    lambda: f64,
) -> Result<(KernelModel, UlsifReport)> {
    let sys = UlsifSystem::build(q, p, centers, bandwidth, lambda)?;
    let alpha = sys.solve()?;
    let report = UlsifReport {
        normal_residual: sys.residual(&alpha),
        objective: sys.objective(&alpha),
    };
    Ok((KernelModel::new(centers, bandwidth, alpha, true), report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KliepReport {
    pub iterations: usize,
    /// `mean_P[ln r]` after each accepted step, starting from the initial point.
    pub objective_trace: Vec<f64>,
    /// An iterate was clipped to all zeros and restarted from uniform.
    pub restarted: bool,
    pub q_mean: f64,
}

/// Projected gradient ascent on `mean_P[ln r]` subject to `alpha >= 0` and
/// `mean_Q[r] = 1`, with backtracking so that accepted steps never lower the
/// objective. Stops when a step changes the objective by less than 1e-12
/// (relative) or no step size improves it.
pub fn fit_kliep(
    q: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
    centers: ArrayView2<'_, f64>,
    bandwidth: f64,
    max_iters: usize,
) -> Result<(KernelModel, KliepReport)> {
    check_kernel_inputs(q, p, centers, bandwidth)?;
    if max_iters == 0 {
        return Err(Error::InvalidConfig("KLIEP needs max_iters >= 1".into()));
    }
    let phi_p = design(p, centers, bandwidth);
    let phi_q = design(q, centers, bandwidth);
    let bq = phi_q.mean_axis(Axis(0)).unwrap();
    let np = p.nrows() as f64;
    let b = centers.nrows();

    let objective = |a: &Array1<f64>| -> f64 { phi_p.dot(a).mapv(f64::ln).sum() / np };
    let bb = bq.dot(&bq);
    // onto b'a = 1 orthogonally, then clip and rescale; the orthogonal part
    // keeps the step an ascent direction for small eta
    let project = |mut a: Array1<f64>| -> Option<Array1<f64>> {
        let gap = 1.0 - bq.dot(&a);
        a.scaled_add(gap / bb, &bq);
        a.mapv_inplace(|x| x.max(0.0));
        let s = bq.dot(&a);
        (s > 0.0).then(|| a / s)
    };
    let uniform = project(Array1::ones(b)).ok_or(Error::ZeroWeights)?;

    let mut alpha = uniform.clone();
    let mut f = objective(&alpha);
    let mut trace = vec![f];
    let mut restarted = false;
    let mut eta = 1.0;
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let inv = phi_p.dot(&alpha).mapv(|v| 1.0 / v);
        let grad = phi_p.t().dot(&inv) / np;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = match project(&alpha + &(eta * &grad)) {
                Some(c) => c,
                None => {
                    restarted = true;
                    uniform.clone()
                }
            };
            let fc = objective(&cand);
            if fc >= f {
                alpha = cand;
                f = fc;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(f);
        eta *= 2.0;
        if trace.len() >= 2 && (trace[trace.len() - 1] - trace[trace.len() - 2]).abs() <= 1e-12 * (1.0 + f.abs()) {
            break;
        }
    }
    let model = KernelModel::new(centers, bandwidth, alpha.to_vec(), false);
    let q_mean = phi_q.dot(&alpha).mean().unwrap();
    Ok((
        model,
        KliepReport {
            iterations,
            objective_trace: trace,
            restarted,
            q_mean,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub n_q: usize,
    pub n_p: usize,
}

impl LogisticModel {
    pub fn logit(&self, z: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>()
    }

    /// Predicted probability that `z` came from the target.
    pub fn target_probability(&self, z: &[f64]) -> f64 {
        sigmoid(self.logit(z))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorReport {
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// `|w| > 1e3`, typically from near-separable classes.
    pub large_weights: bool,
    /// Standard errors of `(intercept, weights...)` from the inverse
    /// observed information of the unregularized likelihood.
    pub std_errors: Vec<f64>,
}

/// Regularized logistic MLE (target = 1) by damped Newton. The intercept is
/// not penalized.
pub fn fit_discriminator(q: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>, l2_reg: f64, max_iters: usize) -> Result<(LogisticModel, DiscriminatorReport)> {
    if q.nrows() == 0 || p.nrows() == 0 {
        return Err(Error::InvalidConfig("discriminator needs both batches nonempty".into()));
    }
    if q.ncols() != p.ncols() {
        return Err(Error::LengthMismatch {
            expected: q.ncols(),
            got: p.ncols(),
        });
    }
    if !(l2_reg >= 0.0) {
        return Err(Error::InvalidConfig(format!("l2 penalty must be nonnegative, got {l2_reg}")));
    }
    let d = q.ncols() + 1;
    let n = q.nrows() + p.nrows();
    let nf = n as f64;
    let mut x = Array2::<f64>::ones((n, d));
    x.slice_mut(ndarray::s![..q.nrows(), 1..]).assign(&q);
    x.slice_mut(ndarray::s![q.nrows().., 1..]).assign(&p);
    let y: Array1<f64> = (0..n).map(|i| if i < q.nrows() { 0.0 } else { 1.0 }).collect();

    let penalty = |theta: &Array1<f64>| -> f64 { 0.5 * l2_reg * theta.iter().skip(1).map(|t| t * t).sum::<f64>() };
    let loss = |theta: &Array1<f64>| -> f64 {
        let eta = x.dot(theta);
        // log(1 + e^eta) - y eta, stable for large |eta|
        eta.iter().zip(&y).map(|(&e, &yi)| crate::net::softplus(e) - yi * e).sum::<f64>() / nf + penalty(theta)
    };

    let mut theta = Array1::<f64>::zeros(d);
    let mut f = loss(&theta);
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let prob = x.dot(&theta).mapv(sigmoid);
        let mut grad = x.t().dot(&(&prob - &y)) / nf;
        for j in 1..d {
            grad[j] += l2_reg * theta[j];
        }
        grad_norm = grad.dot(&grad).sqrt();
        if grad_norm <= 1e-8 {
            converged = true;
            break;
        }
        iterations += 1;
        let s = prob.mapv(|p| p * (1.0 - p));
        let xs = &x * &s.view().insert_axis(Axis(1));
        let mut hess = x.t().dot(&xs) / nf;
        for j in 1..d {
            hess[[j, j]] += l2_reg;
        }
        let l = cholesky(&hess)?;
        let step = Array1::from(cholesky_solve(&l, grad.as_slice().unwrap()));
        let mut t = 1.0;
        loop {
            let cand = &theta - &(t * &step);
            let fc = loss(&cand);
            if fc <= f || t < 1e-10 {
                theta = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
    }
    // observed information of the unpenalized likelihood, n H
    let info = {
        let prob = x.dot(&theta).mapv(sigmoid);
        let s = prob.mapv(|p| p * (1.0 - p));
        let xs = &x * &s.view().insert_axis(Axis(1));
        x.t().dot(&xs)
    };
    let std_errors = match cholesky(&info) {
        Ok(l) => (0..d)
            .map(|j| {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                cholesky_solve(&l, &e)[j].sqrt()
            })
            .collect(),
        Err(_) => vec![f64::INFINITY; d],
    };
    let weights = theta.iter().skip(1).copied().collect::<Vec<_>>();
    let large_weights = weights.iter().map(|w| w * w).sum::<f64>().sqrt() > 1e3;
    Ok((
        LogisticModel {
            weights,
            intercept: theta[0],
            n_q: q.nrows(),
            n_p: p.nrows(),
        },
        DiscriminatorReport {
            iterations,
            converged,
            grad_norm,
            large_weights,
            std_errors,
        },
    ))
}

/// Inverse-odds ratio `(n_q / n_p) p / (1 - p)`, clipped to
/// `[DISCRIMINATOR_FLOOR, DISCRIMINATOR_CEIL]`. The odds are taken as
/// `exp(logit)` rather than from `p`, which avoids cancellation in `1 - p`.
pub fn ratio_from_discriminator(model: &LogisticModel, z: &[f64]) -> f64 {
    let prior = model.n_q as f64 / model.n_p as f64;
    (prior * model.logit(z).exp()).clamp(DISCRIMINATOR_FLOOR, DISCRIMINATOR_CEIL)
}

pub fn discriminator_ratios(model: &LogisticModel, batch: ArrayView2<'_, f64>) -> Vec<f64> {
    batch.rows().into_iter().map(|r| ratio_from_discriminator(model, &r.to_vec())).collect()
}
