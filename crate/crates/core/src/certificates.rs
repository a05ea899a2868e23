//! PAC-Bayes certificates for the importance-weighted risk.
//!
//! Fixed-time bounds come in two forms:
//!
//! ```text
//! sqrt:        R <= R_hat + sqrt((KL + ln(1/delta) + ln t + 2) / (2t - 1))
//! bernoulli:   R <= kl_inv(R_hat, (KL + ln(2 sqrt(t) / delta)) / t)
//! ```
//!
//! The anytime bound partitions `t >= t_min` into geometric epochs
//! `T_k = [t_min b^k, t_min b^{k+1})`, gives epoch `k` the budget
//! `delta_k = delta (b - 1) / b^{k+1}` and spends `delta_k / |T_k|` at each
//! `t` in the epoch, so a union bound covers every `t` at once.
//!
//! All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::GaussianPosterior;

/// `KL(N(a, s2) || N(m, v))` in nats.
pub fn kl_gaussian(posterior: &GaussianPosterior, prior: &GaussianPosterior) -> f64 {
    let ratio = posterior.sigma2 / prior.sigma2;
    let d = posterior.a0 - prior.a0;
    0.5 * (ratio + d * d / prior.sigma2 - 1.0 - ratio.ln())
}

/// Square-root (McAllester-type) bound.
pub fn sqrt_bound(emp_risk: f64, kl: f64, t: u64, delta: f64) -> f64 {
    emp_risk + sqrt_penalty(kl, t, delta)
}

pub fn sqrt_penalty(kl: f64, t: u64, delta: f64) -> f64 {
    let t = t as f64;
    ((kl + (1.0 / delta).ln() + t.ln() + 2.0) / (2.0 * t - 1.0)).sqrt()
}

/// Bernoulli KL divergence `kl(q || p)` with `0 ln 0 = 0`.
///
/// Returns `f64::INFINITY` when `p` sits on a boundary that `q` does not
/// share; never NaN for inputs in `[0, 1]`.
pub fn kl_ber(q: f64, p: f64) -> f64 {
    let term = |a: f64, b: f64| -> f64 {
        if a == 0.0 {
            0.0
        } else if b == 0.0 {
            f64::INFINITY
        } else {
            a * (a / b).ln()
        }
    };
    let v = term(q, p) + term(1.0 - q, 1.0 - p);
    // rounding can push tiny divergences below zero
    v.max(0.0)
}

/// Upper inverse `sup { p in [q, 1] : kl(q || p) <= eps }` by bisection.
pub fn kl_ber_inv_upper(q: f64, eps: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    if eps <= 0.0 || q >= 1.0 {
        return q;
    }
    if kl_ber(q, 1.0) <= eps {
        return 1.0;
    }
    let (mut lo, mut hi) = (q, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if kl_ber(q, mid) <= eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// The Seeger rate `(KL + ln(2 sqrt(t) / delta)) / t`.
pub fn seeger_rate(kl: f64, t: u64, delta: f64) -> f64 {
    let tf = t as f64;
    (kl + (2.0 * tf.sqrt() / delta).ln()) / tf
}

/// Bernoulli-KL (Seeger) bound. Empirical risks at or above one give 1.
pub fn bernoulli_kl_bound(emp_risk: f64, kl: f64, t: u64, delta: f64) -> f64 {
    if emp_risk >= 1.0 {
        return 1.0;
    }
    kl_ber_inv_upper(emp_risk.max(0.0), seeger_rate(kl, t, delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    Sqrt,
    BernoulliKl,
    AnytimeSqrt,
    AnytimeBernoulliKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub emp_risk: f64,
    pub kl: f64,
    pub t: u64,
    pub delta: f64,
    pub mode: BoundMode,
    pub bound: f64,
    pub epoch: Option<u32>,
    pub epoch_budget: Option<f64>,
}

/// Fixed-time certificate.
pub fn fixed_bound(emp_risk: f64, kl: f64, t: u64, delta: f64, bernoulli: bool) -> BoundReport {
    let (mode, bound) = if bernoulli {
        (BoundMode::BernoulliKl, bernoulli_kl_bound(emp_risk, kl, t, delta))
    } else {
        (BoundMode::Sqrt, sqrt_bound(emp_risk, kl, t, delta))
    };
    BoundReport {
        emp_risk,
        kl,
        t,
        delta,
        mode,
        bound,
        epoch: None,
        epoch_budget: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeelingSchedule {
    pub t_min: u64,
    pub b: f64,
    pub delta: f64,
}

impl Default for PeelingSchedule {
    fn default() -> Self {
        Self {
            t_min: 100,
            b: 2.0,
            delta: 0.05,
        }
    }
}

impl PeelingSchedule {
    pub fn new(t_min: u64, b: f64, delta: f64) -> Result<Self> {
        if t_min == 0 || !(b > 1.0 && b.is_finite()) || !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "invalid peeling schedule t_min={t_min} b={b} delta={delta}"
            )));
        }
        Ok(Self { t_min, b, delta })
    }

    fn integer_base(&self) -> Option<u128> {
        (self.b.fract() == 0.0 && self.b < 1e18).then(|| self.b as u128)
    }

    /// Left endpoint `t_min b^k`, exact when `b` is an integer.
    fn left(&self, k: u32) -> f64 {
        match self.integer_base() {
            Some(b) => b
                .checked_pow(k)
                .and_then(|p| p.checked_mul(self.t_min as u128))
                .map_or(f64::INFINITY, |v| v as f64),
            None => self.t_min as f64 * self.b.powi(k as i32),
        }
    }

    /// `k(t)` such that `t_min b^k <= t < t_min b^{k+1}`.
    pub fn epoch_index(&self, t: u64) -> Result<u32> {
        if t < self.t_min {
            return Err(Error::BelowTmin { t, t_min: self.t_min });
        }
        let mut k = 0u32;
        match self.integer_base() {
            Some(b) => {
                let t = t as u128;
                let mut next = self.t_min as u128 * b;
                while next <= t {
                    k += 1;
                    next = match next.checked_mul(b) {
                        Some(v) => v,
                        None => break,
                    };
                }
            }
            None => {
                while self.left(k + 1) <= t as f64 {
                    k += 1;
                }
            }
        }
        Ok(k)
    }

    /// `(delta_k, |T_k|)`.
    pub fn epoch_budget(&self, k: u32) -> (f64, u64) {
        let delta_k = self.delta * (self.b - 1.0) / self.b.powi(k as i32 + 1);
        let size = match self.integer_base() {
            // |T_k| = t_min b^k (b - 1), saturating far out in the schedule
            Some(b) => b
                .checked_pow(k)
                .and_then(|p| p.checked_mul(self.t_min as u128 * (b - 1)))
                .map_or(u64::MAX, |v| u64::try_from(v).unwrap_or(u64::MAX)),
            None => {
                let lo = self.left(k).ceil();
                let hi = self.left(k + 1).ceil();
                (hi - lo) as u64
            }
        };
        (delta_k, size.max(1))
    }

    /// Per-`t` confidence budget `delta_{k(t)} / |T_{k(t)}|`.
    pub fn budget_at(&self, t: u64) -> Result<(u32, f64)> {
        let k = self.epoch_index(t)?;
        let (dk, size) = self.epoch_budget(k);
        Ok((k, dk / size as f64))
    }
}

/// Time-uniform certificate valid simultaneously for all `t >= t_min`.
pub fn anytime_bound(emp_risk: f64, kl: f64, t: u64, schedule: &PeelingSchedule, bernoulli: bool) -> Result<BoundReport> {
    let (k, delta_t) = schedule.budget_at(t)?;
    let (mode, bound) = if bernoulli {
        (BoundMode::AnytimeBernoulliKl, bernoulli_kl_bound(emp_risk, kl, t, delta_t))
    } else {
        (BoundMode::AnytimeSqrt, sqrt_bound(emp_risk, kl, t, delta_t))
    };
    Ok(BoundReport {
        emp_risk,
        kl,
        t,
        delta: schedule.delta,
        mode,
        bound,
        epoch: Some(k),
        epoch_budget: Some(delta_t),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePosterior {
    pub grid: Vec<f64>,
    pub mass: Vec<f64>,
}

impl DiscretePosterior {
    pub fn new(grid: Vec<f64>, mass: Vec<f64>) -> Result<Self> {
        if grid.len() != mass.len() || grid.is_empty() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: mass.len(),
            });
        }
        if mass.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::InvalidConfig("masses must be finite and nonnegative".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("masses sum to {total}, not 1")));
        }
        Ok(Self { grid, mass })
    }

    /// Uniform grid of `n` points on `[lo, hi]`.
    pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    /// Default hypothesis grid: 601 points on `[-3, 3]`.
    pub fn default_grid() -> Vec<f64> {
        Self::uniform_grid(-3.0, 3.0, 601)
    }

    /// Discretized Gaussian `N(m, v)` on `grid`.
    pub fn gaussian_on(grid: Vec<f64>, m: f64, v: f64) -> Self {
        let logw: Vec<f64> = grid.iter().map(|a| -0.5 * (a - m) * (a - m) / v).collect();
        let mass = softmax(&logw);
        Self { grid, mass }
    }

    fn check_grid(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(format!("{} vs {} points", self.grid.len(), other.grid.len())));
        }
        Ok(())
    }

    /// `E_rho[f(a)]`.
    pub fn expect(&self, values: &[f64]) -> f64 {
        self.mass.iter().zip(values).map(|(m, v)| if *m == 0.0 { 0.0 } else { m * v }).sum()
    }
}

fn softmax(logw: &[f64]) -> Vec<f64> {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Gibbs posterior `mass_i ∝ prior_i exp(-beta risk_i)`.
pub fn gibbs_posterior(grid_risks: &[f64], prior: &DiscretePosterior, beta: f64) -> Result<DiscretePosterior> {
    if grid_risks.len() != prior.grid.len() {
        return Err(Error::LengthMismatch {
            expected: prior.grid.len(),
            got: grid_risks.len(),
        });
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    let logw: Vec<f64> = prior
        .mass
        .iter()
        .zip(grid_risks)
        .map(|(p, r)| if *p > 0.0 { p.ln() - beta * r } else { f64::NEG_INFINITY })
        .collect();
    Ok(DiscretePosterior {
        grid: prior.grid.clone(),
        mass: softmax(&logw),
    })
}

/// `KL(p || q)` on a shared grid; infinite when `p` is not dominated by `q`.
pub fn kl_discrete(p: &DiscretePosterior, q: &DiscretePosterior) -> Result<f64> {
    p.check_grid(q)?;
    let mut s = 0.0;
    for (a, b) in p.mass.iter().zip(&q.mass) {
        if *a > 0.0 {
            if *b == 0.0 {
                return Ok(f64::INFINITY);
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s.max(0.0))
}

/// Total variation distance on a shared grid.
pub fn tv_distance(p: &DiscretePosterior, q: &DiscretePosterior) -> Result<f64> {
    p.check_grid(q)?;
    Ok((0.5 * p.mass.iter().zip(&q.mass).map(|(a, b)| (a - b).abs()).sum::<f64>()).min(1.0))
}

/// Both sides of `J(rho) - J(rho*) = KL(rho || rho*) / beta`, where
/// `J(rho) = E_rho[risk] + KL(rho || prior) / beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsGap {
    pub objective_gap: f64,
    pub scaled_kl: f64,
}

pub fn gibbs_objective(rho: &DiscretePosterior, beta: f64, grid_risks: &[f64], prior: &DiscretePosterior) -> Result<f64> {
    Ok(rho.expect(grid_risks) + kl_discrete(rho, prior)? / beta)
}

pub fn gibbs_objective_gap(
    candidate: &DiscretePosterior,
    gibbs: &DiscretePosterior,
    beta: f64,
    grid_risks: &[f64],
    prior: &DiscretePosterior,
) -> Result<GibbsGap> {
    candidate.check_grid(gibbs)?;
    candidate.check_grid(prior)?;
    if let Some(i) = candidate.mass.iter().zip(&gibbs.mass).position(|(c, g)| *c > 0.0 && *g == 0.0) {
        return Err(Error::NotAbsolutelyContinuous(i));
    }
    let objective_gap = gibbs_objective(candidate, beta, grid_risks, prior)? - gibbs_objective(gibbs, beta, grid_risks, prior)?;
    let scaled_kl = kl_discrete(candidate, gibbs)? / beta;
    Ok(GibbsGap { objective_gap, scaled_kl })
}
