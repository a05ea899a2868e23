//! LSIF fitting under augmented-Lagrangian integral constraints.
//!
//! The primal objective is
//!
//! ```text
//! L_AL = J_fit + lambda g0 + rho0/2 g0^2 + sum_j (mu_j g_j + rho_j/2 g_j^2)
//! J_fit = 1/2 mean_Q[r^2] - mean_P[r]
//! g0    = mean_Q[r] - 1
//! g_j   = mean_Q[r phi_j] - mean_P[phi_j]
//! ```
//!
//! minimized by full-batch Adam, with one dual ascent step
//! `lambda += eta_norm g0`, `mu_j += eta_mm g_j` after every primal step.
//! Under clipping the residuals use `min(r, c)`; under tempering only the
//! LSIF term sees `r^beta`.

use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{l2q_error_from_weights, KahanSum};
use crate::error::{Error, Result};
use crate::lab::{sample, Law, SampleBatch, ShiftConfig};
use crate::net::{adam_step, column, AdamState, RatioModel};
use crate::rng::{derive_seed, Stream};

/// Moment test function `x[feature]^power`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestFunction {
    pub feature: usize,
    pub power: i32,
}

impl TestFunction {
    #[inline]
    pub fn eval(&self, row: &[f64]) -> f64 {
        row[self.feature].powi(self.power)
    }
}

/// `phi_1(z) = z`, `phi_2(z) = z^2`.
pub fn default_test_functions() -> Vec<TestFunction> {
    vec![
        TestFunction { feature: 0, power: 1 },
        TestFunction { feature: 0, power: 2 },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    None,
    Norm,
    NormMoments,
}

impl ConstraintMode {
    pub fn norm_active(self) -> bool {
        !matches!(self, ConstraintMode::None)
    }

    pub fn moments_active(self) -> bool {
        matches!(self, ConstraintMode::NormMoments)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TailMode {
    Raw,
    Clip { c: f64 },
    /// Applies to the LSIF term only; the deployed ratio stays raw.
    Temper { beta: f64 },
}

impl TailMode {
    pub fn clip(&self) -> Option<f64> {
        match *self {
            TailMode::Clip { c } => Some(c),
            _ => None,
        }
    }

    fn beta(&self) -> f64 {
        match *self {
            TailMode::Temper { beta } => beta,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResiduals {
    pub g0: f64,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DualStatus {
    Ok,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: f64,
    pub mus: Vec<f64>,
    pub rho0: f64,
    pub rhos: Vec<f64>,
    pub eta_norm: f64,
    pub eta_mm: f64,
    pub cap: f64,
}

impl DualState {
    pub fn new(m: usize, rho0: f64, rho_mm: f64, eta_norm: f64, eta_mm: f64) -> Self {
        Self {
            lambda: 0.0,
            mus: vec![0.0; m],
            rho0,
            rhos: vec![rho_mm; m],
            eta_norm,
            eta_mm,
            cap: 1e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho0 > 0.0) || self.rhos.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidConfig("penalties must be positive".into()));
        }
        if !(self.eta_norm > 0.0 && self.eta_mm > 0.0) {
            return Err(Error::InvalidConfig("dual step sizes must be positive".into()));
        }
        if self.mus.len() != self.rhos.len() {
            return Err(Error::LengthMismatch {
                expected: self.mus.len(),
                got: self.rhos.len(),
            });
        }
        Ok(())
    }

    pub fn status(&self) -> DualStatus {
        let over = |x: f64| !x.is_finite() || x.abs() > self.cap;
        if over(self.lambda) || self.mus.iter().any(|&m| over(m)) {
            DualStatus::Diverged
        } else {
            DualStatus::Ok
        }
    }

    /// Dual ascent on the active multipliers.
    pub fn update(&mut self, res: &ConstraintResiduals, mode: ConstraintMode) -> Result<DualStatus> {
        if !res.g0.is_finite() || res.g.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("constraint residual".into()));
        }
        if mode.norm_active() {
            self.lambda += self.eta_norm * res.g0;
        }
        if mode.moments_active() {
            for (m, g) in self.mus.iter_mut().zip(&res.g) {
                *m += self.eta_mm * g;
            }
        }
        Ok(self.status())
    }
}

/// Shorthand for [`DualState::update`] with every constraint active.
pub fn dual_update(duals: &DualState, res: &ConstraintResiduals) -> Result<(DualState, DualStatus)> {
    let mut d = duals.clone();
    let s = d.update(res, ConstraintMode::NormMoments)?;
    Ok((d, s))
}

/// Residuals of given ratio values on the source batch.
pub fn residuals_from_weights(
    ratio_q: &[f64],
    q_rows: ArrayView2<'_, f64>,
    p_rows: ArrayView2<'_, f64>,
    test_fns: &[TestFunction],
) -> Result<ConstraintResiduals> {
    if ratio_q.len() != q_rows.nrows() {
        return Err(Error::LengthMismatch {
            expected: q_rows.nrows(),
            got: ratio_q.len(),
        });
    }
    if q_rows.nrows() == 0 || p_rows.nrows() == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let nq = q_rows.nrows() as f64;
    let mut s0 = KahanSum::default();
    for &r in ratio_q {
        s0.add(r);
    }
    let p_means = target_means(p_rows, test_fns);
    let g = test_fns
        .iter()
        .zip(&p_means)
        .map(|(phi, pm)| {
            let mut s = KahanSum::default();
            for (r, row) in ratio_q.iter().zip(q_rows.rows()) {
                s.add(r * phi.eval(row.as_slice().unwrap()));
            }
            s.value() / nq - pm
        })
        .collect();
    Ok(ConstraintResiduals {
        g0: s0.value() / nq - 1.0,
        g,
    })
}

fn target_means(p_rows: ArrayView2<'_, f64>, test_fns: &[TestFunction]) -> Vec<f64> {
    let np = p_rows.nrows() as f64;
    test_fns
        .iter()
        .map(|phi| {
            let mut s = KahanSum::default();
            for row in p_rows.rows() {
                s.add(phi.eval(row.as_slice().unwrap()));
            }
            s.value() / np
        })
        .collect()
}

/// Empirical residuals of `model` for one-dimensional batches.
pub fn residuals(model: &RatioModel, q: &[f64], p: &[f64], test_fns: &[TestFunction]) -> Result<ConstraintResiduals> {
    let qm = column(q);
    let pm = column(p);
    residuals_from_weights(&model.evaluate(q), qm.view(), pm.view(), test_fns)
}

/// Value and gradient of the augmented Lagrangian, with its parts.
#[derive(Debug, Clone)]
pub struct AlEvaluation {
    pub value: f64,
    pub lsif: f64,
    pub residuals: ConstraintResiduals,
    pub grad: Vec<f64>,
    /// Ratio on the source rows, before any clipping.
    pub ratio_q: Vec<f64>,
}

/// A fixed pair of source/target batches with precomputed target moments.
#[derive(Debug, Clone)]
pub struct AlProblem {
    inputs: Array2<f64>,
    n_q: usize,
    test_fns: Vec<TestFunction>,
    /// `phi_j` evaluated on the source rows.
    phi_q: Vec<Vec<f64>>,
    p_means: Vec<f64>,
    pub mode: ConstraintMode,
    pub tail: TailMode,
}

impl AlProblem {
    pub fn new(
        q_rows: ArrayView2<'_, f64>,
        p_rows: ArrayView2<'_, f64>,
        test_fns: Vec<TestFunction>,
        mode: ConstraintMode,
        tail: TailMode,
    ) -> Result<Self> {
        if q_rows.nrows() == 0 || p_rows.nrows() == 0 {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        if q_rows.ncols() != p_rows.ncols() {
            return Err(Error::LengthMismatch {
                expected: q_rows.ncols(),
                got: p_rows.ncols(),
            });
        }
        let q_rows = q_rows.as_standard_layout();
        let p_rows = p_rows.as_standard_layout();
        let phi_q = test_fns
            .iter()
            .map(|phi| q_rows.rows().into_iter().map(|r| phi.eval(r.as_slice().unwrap())).collect())
            .collect();
        let p_means = target_means(p_rows.view(), &test_fns);
        Ok(Self {
            inputs: concatenate(Axis(0), &[q_rows.view(), p_rows.view()]).unwrap(),
            n_q: q_rows.nrows(),
            test_fns,
            phi_q,
            p_means,
            mode,
            tail,
        })
    }

    pub fn one_dim(q: &[f64], p: &[f64], mode: ConstraintMode, tail: TailMode) -> Result<Self> {
        Self::new(column(q).view(), column(p).view(), default_test_functions(), mode, tail)
    }

    pub fn n_moments(&self) -> usize {
        self.test_fns.len()
    }

    pub fn q_rows(&self) -> ArrayView2<'_, f64> {
        self.inputs.slice(ndarray::s![..self.n_q, ..])
    }

    pub fn p_rows(&self) -> ArrayView2<'_, f64> {
        self.inputs.slice(ndarray::s![self.n_q.., ..])
    }

    /// Evaluate `L_AL` and its exact gradient at `model`.
    pub fn evaluate(&self, model: &RatioModel, duals: &DualState) -> Result<AlEvaluation> {
        let cache = model.forward_blocked(self.inputs.view());
        let r = cache.ratio.as_slice();
        let (rq, rp) = r.split_at(self.n_q);
        let nq = self.n_q as f64;
        let np = rp.len() as f64;
        let beta = self.tail.beta();
        let clip = self.tail.clip();

        // residuals on the deployed (possibly clipped) ratio
        let deployed = |x: f64| clip.map_or(x, |c| x.min(c));
        let mut s0 = KahanSum::default();
        let mut sj = vec![KahanSum::default(); self.n_moments()];
        for (i, &x) in rq.iter().enumerate() {
            let d = deployed(x);
            s0.add(d);
            for (s, phi) in sj.iter_mut().zip(&self.phi_q) {
                s.add(d * phi[i]);
            }
        }
        let res = ConstraintResiduals {
            g0: s0.value() / nq - 1.0,
            g: sj.iter().zip(&self.p_means).map(|(s, pm)| s.value() / nq - pm).collect(),
        };

        let mut lq = KahanSum::default();
        let mut lp = KahanSum::default();
        if beta == 1.0 {
            rq.iter().for_each(|&x| lq.add(x * x));
            rp.iter().for_each(|&x| lp.add(x));
        } else {
            rq.iter().for_each(|&x| lq.add(x.powf(2.0 * beta)));
            rp.iter().for_each(|&x| lp.add(x.powf(beta)));
        }
        let lsif = 0.5 * lq.value() / nq - lp.value() / np;

        let mut value = lsif;
        let k0 = if self.mode.norm_active() {
            value += duals.lambda * res.g0 + 0.5 * duals.rho0 * res.g0 * res.g0;
            duals.lambda + duals.rho0 * res.g0
        } else {
            0.0
        };
        let kj: Vec<f64> = if self.mode.moments_active() {
            res.g
                .iter()
                .zip(duals.mus.iter().zip(&duals.rhos))
                .map(|(g, (m, rho))| {
                    value += m * g + 0.5 * rho * g * g;
                    m + rho * g
                })
                .collect()
        } else {
            vec![0.0; self.n_moments()]
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("augmented Lagrangian value {value}")));
        }

        let mut upstream = Vec::with_capacity(r.len());
        for (i, &x) in rq.iter().enumerate() {
            let fit = if beta == 1.0 { x } else { beta * x.powf(2.0 * beta - 1.0) };
            let passes = clip.map_or(true, |c| x < c);
            let mut con = 0.0;
            if passes {
                con = k0;
                for (k, phi) in kj.iter().zip(&self.phi_q) {
                    con += k * phi[i];
                }
            }
            upstream.push((fit + con) / nq);
        }
        for &x in rp {
            let fit = if beta == 1.0 { 1.0 } else { beta * x.powf(beta - 1.0) };
            upstream.push(-fit / np);
        }
        let grad = model.backward_blocked(&cache, &upstream)?;
        Ok(AlEvaluation {
            value,
            lsif,
            residuals: res,
            grad,
            ratio_q: rq.to_vec(),
        })
    }
}

/// LSIF objective `1/2 mean_Q[r^2] - mean_P[r]` and its gradient.
pub fn lsif_value_and_grad(model: &RatioModel, q: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
    let prob = AlProblem::one_dim(q, p, ConstraintMode::None, TailMode::Raw)?;
    let e = prob.evaluate(model, &DualState::new(2, 1.0, 1.0, 0.1, 5e-3))?;
    Ok((e.lsif, e.grad))
}

/// Augmented Lagrangian value and gradient for one-dimensional batches.
pub fn al_value_and_grad(
    model: &RatioModel,
    duals: &DualState,
    q: &[f64],
    p: &[f64],
    mode: ConstraintMode,
) -> Result<(f64, Vec<f64>)> {
    let prob = AlProblem::one_dim(q, p, mode, TailMode::Raw)?;
    let e = prob.evaluate(model, duals)?;
    Ok((e.value, e.grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub constraint_mode: ConstraintMode,
    pub tail_mode: TailMode,
    pub lr: f64,
    pub eta_norm: f64,
    pub eta_mm: f64,
    pub rho0: f64,
    pub rho_mm: f64,
    pub dual_cap: f64,
    pub layer_sizes: Vec<usize>,
    pub floor: f64,
    pub shift: ShiftConfig,
    /// Mini-batch size; `None` means full batch.
    pub batch_size: Option<usize>,
    /// Record `L^2(Q)` on a held-out source batch every this many steps.
    pub l2q_every: Option<usize>,
}

impl TrainConfig {
    pub fn patch_test(mu: f64, seed: u64, mode: ConstraintMode) -> Self {
        Self {
            steps: 2000,
            constraint_mode: mode,
            tail_mode: TailMode::Raw,
            lr: 1e-3,
            eta_norm: 1e-1,
            eta_mm: 5e-3,
            rho0: 1.0,
            rho_mm: 1.0,
            dual_cap: 1e6,
            layer_sizes: vec![1, 64, 64, 1],
            floor: 1e-3,
            shift: ShiftConfig {
                mu,
                n_q: 10_000,
                n_p: 10_000,
                seed,
            },
            batch_size: None,
            l2q_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shift.validate()?;
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        match self.tail_mode {
            TailMode::Clip { c } if !(c > 0.0) => {
                return Err(Error::InvalidConfig(format!("clip threshold must be positive, got {c}")))
            }
            TailMode::Temper { beta } if !(beta > 0.0 && beta <= 1.0) => {
                return Err(Error::InvalidConfig(format!("beta must lie in (0, 1], got {beta}")))
            }
            _ => {}
        }
        if matches!(self.batch_size, Some(0)) {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.shift.seed, &[0x1417])
    }

    pub fn holdout_seed(&self) -> u64 {
        derive_seed(self.shift.seed, &[0x40_1d])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub lsif: f64,
    pub g0: f64,
    pub g: Vec<f64>,
    pub lambda: f64,
    pub mus: Vec<f64>,
    pub l2q: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with columns `step,lsif,g0,g1,g2,lambda,mu1,mu2,l2q_optional`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "lsif", "g0", "g1", "g2", "lambda", "mu1", "mu2", "l2q_optional"])?;
        let opt = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.lsif.to_string(),
                r.g0.to_string(),
                opt(r.g.first()),
                opt(r.g.get(1)),
                r.lambda.to_string(),
                opt(r.mus.first()),
                opt(r.mus.get(1)),
                opt(r.l2q.as_ref()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Ratio used downstream: the raw network, optionally clipped. Never tempered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployedRatio {
    pub model: RatioModel,
    pub clip: Option<f64>,
}

impl DeployedRatio {
    pub fn evaluate(&self, zs: &[f64]) -> Vec<f64> {
        self.apply(self.model.evaluate(zs))
    }

    pub fn evaluate_rows(&self, rows: ArrayView2<'_, f64>) -> Vec<f64> {
        self.apply(self.model.evaluate_rows(rows))
    }

    fn apply(&self, mut r: Vec<f64>) -> Vec<f64> {
        if let Some(c) = self.clip {
            for x in &mut r {
                *x = x.min(c);
            }
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: RatioModel,
    pub duals: DualState,
    pub trace: TrainTrace,
    pub status: DualStatus,
    /// Residuals of the deployed ratio at the final parameters.
    pub final_residuals: ConstraintResiduals,
    pub deployed: DeployedRatio,
}

/// Train on the Gaussian shift instance described by `config.shift`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let q = sample(&config.shift, Law::Source);
    let p = sample(&config.shift, Law::Target);
    let holdout = config.l2q_every.map(|_| {
        let c = config.shift.with_seed(config.holdout_seed());
        (sample(&c, Law::Source), config.shift.mu)
    });
    train_on(
        config,
        column(&q.values).view(),
        column(&p.values).view(),
        default_test_functions(),
        holdout.as_ref().map(|(b, mu)| (b, *mu)),
    )
}

/// Train on arbitrary source/target rows.
///
/// `holdout` supplies an independent source batch and the shift used for the
/// optional `L^2(Q)` column of the trace (only meaningful on the Gaussian
/// instance).
pub fn train_on(
    config: &TrainConfig,
    q_rows: ArrayView2<'_, f64>,
    p_rows: ArrayView2<'_, f64>,
    test_fns: Vec<TestFunction>,
    holdout: Option<(&SampleBatch, f64)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut sizes = config.layer_sizes.clone();
    if sizes.is_empty() {
        return Err(Error::EmptyLayers);
    }
    sizes[0] = q_rows.ncols();
    let mut model = RatioModel::init(&sizes, config.floor, config.init_seed())?;
    let mut adam = AdamState::new(model.n_params(), config.lr);
    let m = if config.constraint_mode.moments_active() { test_fns.len() } else { 0 };
    let mut duals = DualState::new(test_fns.len(), config.rho0, config.rho_mm, config.eta_norm, config.eta_mm);
    duals.cap = config.dual_cap;
    duals.validate()?;

    let full = AlProblem::new(q_rows, p_rows, test_fns.clone(), config.constraint_mode, config.tail_mode)?;
    let mut batch_stream = Stream::new(derive_seed(config.shift.seed, &[0xba7c4]));
    let mut trace = TrainTrace::default();
    let mut status = DualStatus::Ok;

    for step in 0..config.steps {
        let eval = match config.batch_size {
            None => full.evaluate(&model, &duals)?,
            Some(b) => {
                let qi = batch_stream.choose_indices(q_rows.nrows(), b);
                let pi = batch_stream.choose_indices(p_rows.nrows(), b);
                let sub = AlProblem::new(
                    q_rows.select(Axis(0), &qi).view(),
                    p_rows.select(Axis(0), &pi).view(),
                    test_fns.clone(),
                    config.constraint_mode,
                    config.tail_mode,
                )?;
                sub.evaluate(&model, &duals)?
            }
        };
        let l2q = match (config.l2q_every, holdout) {
            (Some(every), Some((hb, mu))) if step % every == 0 || step + 1 == config.steps => {
                Some(l2q_error_from_weights(&model.evaluate(&hb.values), mu, &hb.values)?)
            }
            _ => None,
        };
        trace.records.push(TraceRecord {
            step,
            lsif: eval.lsif,
            g0: eval.residuals.g0,
            g: eval.residuals.g.clone(),
            lambda: duals.lambda,
            mus: duals.mus[..m].to_vec(),
            l2q,
        });
        adam_step(&mut model, &mut adam, &eval.grad)?;
        if config.constraint_mode.norm_active() {
            status = duals.update(&eval.residuals, config.constraint_mode)?;
            if status == DualStatus::Diverged {
                break;
            }
        }
    }

    let deployed = DeployedRatio {
        model: model.clone(),
        clip: config.tail_mode.clip(),
    };
    let final_residuals = residuals_from_weights(
        &deployed.evaluate_rows(full.q_rows()),
        full.q_rows(),
        full.p_rows(),
        &test_fns,
    )?;
    Ok(TrainOutcome {
        model,
        duals,
        trace,
        status,
        final_residuals,
        deployed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::true_ratio;
    use approx::assert_relative_eq;

    fn small_batches(seed: u64) -> (Vec<f64>, Vec<f64>) {
        let c = ShiftConfig::new(0.5, 40, 30, seed).unwrap();
        (sample(&c, Law::Source).values, sample(&c, Law::Target).values)
    }

    fn fd<F: Fn(&RatioModel) -> f64>(model: &RatioModel, f: F) -> Vec<f64> {
        let h = 1e-5;
        (0..model.n_params())
            .map(|k| {
                let mut m = model.clone();
                m.params[k] += h;
                let a = f(&m);
                m.params[k] -= 2.0 * h;
                let b = f(&m);
                (a - b) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        for (k, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale <= 1e-4, "coord {k}: {x} vs {y}");
        }
    }

    #[test]
    fn lsif_population_value_at_true_ratio() {
        // J(r*) = -1/2 E_Q[r*^2] = -1/2 e^{mu^2}; checked by Monte Carlo
        let n = 200_000;
        let mu = 0.5;
        let c = ShiftConfig::new(mu, n, n, 21).unwrap();
        let q = sample(&c, Law::Source).values;
        let p = sample(&c, Law::Target).values;
        let rq: Vec<f64> = q.iter().map(|&z| true_ratio(z, mu)).collect();
        let rp: Vec<f64> = p.iter().map(|&z| true_ratio(z, mu)).collect();
        let j = 0.5 * rq.iter().map(|r| r * r).sum::<f64>() / n as f64 - rp.iter().sum::<f64>() / n as f64;
        let target = -0.5 * (mu * mu as f64).exp();
        assert!((j - target).abs() < 0.02, "{j} vs {target}");
    }

    #[test]
    fn lsif_constant_model_same_law() {
        let mut m = RatioModel::init(&[1, 1], 1e-3, 0).unwrap();
        // softplus(b) = 1
        m.params = vec![0.0, (1.0f64.exp() - 1.0).ln()];
        let (q, _) = small_batches(3);
        let (v, _) = lsif_value_and_grad(&m, &q, &q).unwrap();
        assert_relative_eq!(v, -0.5, max_relative = 1e-12);
    }

    #[test]
    fn lsif_gradient_matches_fd() {
        for seed in 0..3 {
            let m = RatioModel::init(&[1, 5, 5, 1], 1e-3, seed).unwrap();
            let (q, p) = small_batches(seed);
            let (_, g) = lsif_value_and_grad(&m, &q, &p).unwrap();
            let num = fd(&m, |mm| lsif_value_and_grad(mm, &q, &p).unwrap().0);
            assert_close(&g, &num);
        }
    }

    #[test]
    fn al_gradient_matches_fd() {
        for seed in 0..3 {
            let m = RatioModel::init(&[1, 4, 3, 1], 1e-3, 10 + seed).unwrap();
            let (q, p) = small_batches(seed);
            let mut d = DualState::new(2, 0.7, 1.3, 0.1, 5e-3);
            d.lambda = 0.4;
            d.mus = vec![-0.3, 0.2];
            for mode in [ConstraintMode::None, ConstraintMode::Norm, ConstraintMode::NormMoments] {
                let (_, g) = al_value_and_grad(&m, &d, &q, &p, mode).unwrap();
                let num = fd(&m, |mm| al_value_and_grad(mm, &d, &q, &p, mode).unwrap().0);
                assert_close(&g, &num);
            }
        }
    }

    #[test]
    fn tempered_and_clipped_gradient_matches_fd() {
        let m = RatioModel::init(&[1, 4, 4, 1], 1e-3, 4).unwrap();
        let (q, p) = small_batches(4);
        let mut d = DualState::new(2, 1.0, 1.0, 0.1, 5e-3);
        d.lambda = 0.2;
        let r = m.evaluate(&q);
        let mut sorted = r.clone();
        sorted.sort_by(f64::total_cmp);
        // a threshold strictly between two ratio values keeps the clip smooth locally
        let c = 0.5 * (sorted[30] + sorted[31]);
        for tail in [TailMode::Temper { beta: 0.6 }, TailMode::Clip { c }] {
            let prob = AlProblem::one_dim(&q, &p, ConstraintMode::NormMoments, tail).unwrap();
            let g = prob.evaluate(&m, &d).unwrap().grad;
            let num = fd(&m, |mm| prob.evaluate(mm, &d).unwrap().value);
            assert_close(&g, &num);
        }
    }

    #[test]
    fn al_reduces_to_lsif_at_zero_residual() {
        // constant ratio 1 with q batch of mean-one weights: g0 = 0
        let mut m = RatioModel::init(&[1, 1], 1e-3, 0).unwrap();
        m.params = vec![0.0, (1.0f64.exp() - 1.0).ln()];
        let (q, p) = small_batches(1);
        let mut d = DualState::new(2, 1.0, 1.0, 0.1, 5e-3);
        d.lambda = 3.0;
        let (v_al, g_al) = al_value_and_grad(&m, &d, &q, &p, ConstraintMode::Norm).unwrap();
        let (v, g) = lsif_value_and_grad(&m, &q, &p).unwrap();
        assert_relative_eq!(v_al, v, max_relative = 1e-12);
        // gradient differs by the multiplier's pull on mean_Q[r]; with lambda = 0 they agree
        d.lambda = 0.0;
        let (_, g0) = al_value_and_grad(&m, &d, &q, &p, ConstraintMode::Norm).unwrap();
        for (a, b) in g0.iter().zip(&g) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_ne!(g_al, g);
    }

    #[test]
    fn al_linear_term_example() {
        // lambda = 1, rho0 -> 0, g0 = 0.1: L_AL = J + 0.1
        let mut m = RatioModel::init(&[1, 1], 1e-3, 0).unwrap();
        m.params = vec![0.0, (1.1f64.exp() - 1.0).ln()];
        let (q, p) = small_batches(2);
        let mut d = DualState::new(2, 1e-300, 1.0, 0.1, 5e-3);
        d.lambda = 1.0;
        let (v_al, _) = al_value_and_grad(&m, &d, &q, &p, ConstraintMode::Norm).unwrap();
        let (v, _) = lsif_value_and_grad(&m, &q, &p).unwrap();
        assert_relative_eq!(v_al - v, 0.1, max_relative = 1e-10);
    }

    #[test]
    fn residual_examples() {
        let mut m = RatioModel::init(&[1, 1], 1e-3, 0).unwrap();
        m.params = vec![0.0, (1.0f64.exp() - 1.0).ln()];
        let (q, _) = small_batches(5);
        let r = residuals(&m, &q, &q, &default_test_functions()).unwrap();
        assert!(r.g0.abs() < 1e-12);
        assert!(r.g.iter().all(|g| g.abs() < 1e-12));

        // P = Q in law, model == 1: g1 = mean_Q[z] - mean_P[z], small by CLT
        let n = 20_000;
        let c = ShiftConfig::new(0.0, n, n, 6).unwrap();
        let q = sample(&c, Law::Source).values;
        let p = sample(&c, Law::Target).values;
        let r = residuals(&m, &q, &p, &default_test_functions()).unwrap();
        assert!(r.g[0].abs() <= 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn residuals_of_true_ratio_in_clt_band() {
        let n = 100_000;
        let mu = 0.5;
        let c = ShiftConfig::new(mu, n, n, 31).unwrap();
        let q = sample(&c, Law::Source).values;
        let p = sample(&c, Law::Target).values;
        let w: Vec<f64> = q.iter().map(|&z| true_ratio(z, mu)).collect();
        let r = residuals_from_weights(&w, column(&q).view(), column(&p).view(), &default_test_functions()).unwrap();
        assert!(r.g0.abs() <= 4.0 * ((mu * mu).exp_m1() / n as f64).sqrt());
    }

    #[test]
    fn dual_update_examples() {
        let d = DualState::new(2, 1.0, 1.0, 0.1, 5e-3);
        let zero = ConstraintResiduals { g0: 0.0, g: vec![0.0, 0.0] };
        let (d2, s) = dual_update(&d, &zero).unwrap();
        assert_eq!(d2, d);
        assert_eq!(s, DualStatus::Ok);

        let (d3, _) = dual_update(&d, &ConstraintResiduals { g0: 0.2, g: vec![0.0, 0.0] }).unwrap();
        assert_relative_eq!(d3.lambda, 0.02, max_relative = 1e-15);
        assert_eq!(d3.rho0, d.rho0);

        let mut cur = d.clone();
        let mut prev = cur.lambda;
        for _ in 0..10 {
            cur.update(&ConstraintResiduals { g0: 0.05, g: vec![0.0, 0.0] }, ConstraintMode::Norm).unwrap();
            assert!(cur.lambda > prev);
            prev = cur.lambda;
        }
    }

    #[test]
    fn dual_cap_flags_divergence() {
        let mut d = DualState::new(2, 1.0, 1.0, 1.0, 5e-3);
        d.cap = 10.0;
        let s = d.update(&ConstraintResiduals { g0: 11.0, g: vec![0.0, 0.0] }, ConstraintMode::Norm).unwrap();
        assert_eq!(s, DualStatus::Diverged);
        assert!(d.update(&ConstraintResiduals { g0: f64::NAN, g: vec![] }, ConstraintMode::Norm).is_err());
    }

    fn quick_config(mode: ConstraintMode) -> TrainConfig {
        let mut c = TrainConfig::patch_test(0.5, 3, mode);
        c.steps = 60;
        c.layer_sizes = vec![1, 8, 8, 1];
        c.shift.n_q = 500;
        c.shift.n_p = 500;
        c
    }

    #[test]
    fn training_is_deterministic() {
        let c = quick_config(ConstraintMode::NormMoments);
        let a = train(&c).unwrap();
        let b = train(&c).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace.len(), c.steps);
    }

    #[test]
    fn training_modes_run() {
        for mode in [ConstraintMode::None, ConstraintMode::Norm, ConstraintMode::NormMoments] {
            let mut c = quick_config(mode);
            c.l2q_every = Some(20);
            let out = train(&c).unwrap();
            assert_eq!(out.status, DualStatus::Ok);
            assert!(out.trace.records[0].l2q.is_some());
            assert!(out.trace.records.last().unwrap().l2q.is_some());
            if mode == ConstraintMode::None {
                assert_eq!(out.duals.lambda, 0.0);
            }
        }
        let mut c = quick_config(ConstraintMode::Norm);
        c.tail_mode = TailMode::Clip { c: 1.2 };
        let out = train(&c).unwrap();
        assert_eq!(out.deployed.clip, Some(1.2));
        assert!(out.deployed.evaluate(&[5.0, 10.0]).iter().all(|&r| r <= 1.2));
        let mut c = quick_config(ConstraintMode::Norm);
        c.tail_mode = TailMode::Temper { beta: 0.5 };
        assert_eq!(train(&c).unwrap().deployed.clip, None);
        let mut c = quick_config(ConstraintMode::NormMoments);
        c.batch_size = Some(64);
        assert_eq!(train(&c).unwrap().trace.len(), 60);
    }

    #[test]
    fn invalid_train_configs() {
        let mut c = quick_config(ConstraintMode::Norm);
        c.steps = 0;
        assert!(train(&c).is_err());
        let mut c = quick_config(ConstraintMode::Norm);
        c.tail_mode = TailMode::Clip { c: 0.0 };
        assert!(train(&c).is_err());
        let mut c = quick_config(ConstraintMode::Norm);
        c.tail_mode = TailMode::Temper { beta: 1.5 };
        assert!(train(&c).is_err());
    }

    #[test]
    fn trace_csv_columns() {
        let out = train(&quick_config(ConstraintMode::NormMoments)).unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,lsif,g0,g1,g2,lambda,mu1,mu2,l2q_optional");
        assert_eq!(lines.count(), 60);
    }
}
