//! Losses and importance-weighted risks on the scalar linear family
//! `h_a(z) = a z` with squared loss `(z - a z)^2 = (1 - a)^2 z^2`.

use serde::{Deserialize, Serialize};

use crate::diagnostics::compensated_sum;
use crate::error::{Error, Result};

/// Ceiling used to rescale the squared loss into `[0, 1]`.
pub const L_MAX: f64 = 16.0;

/// Predictor grid of the weighted-risk stage.
pub const PREDICTOR_GRID: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub a: f64,
}

impl Predictor {
    pub fn predict(&self, z: f64) -> f64 {
        self.a * z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub a0: f64,
    pub sigma2: f64,
}

impl GaussianPosterior {
    pub fn new(a0: f64, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite() && a0.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid Gaussian posterior N({a0}, {sigma2})")));
        }
        Ok(Self { a0, sigma2 })
    }

    /// The prior `N(0, 1)`.
    pub fn standard() -> Self {
        Self { a0: 0.0, sigma2: 1.0 }
    }

    /// The sanity posterior `N(0.5, 0.01)`.
    pub fn sanity() -> Self {
        Self { a0: 0.5, sigma2: 0.01 }
    }

    /// `E_{a ~ rho}[(1 - a)^2]`.
    pub fn expected_sq_gap(&self) -> f64 {
        (1.0 - self.a0).powi(2) + self.sigma2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    ClippedScaled,
}

pub fn squared_loss(a: f64, z: f64) -> f64 {
    let e = z - a * z;
    e * e
}

/// `min(L, L_MAX) / L_MAX`.
pub fn clipped_scaled_loss(a: f64, z: f64) -> f64 {
    squared_loss(a, z).min(L_MAX) / L_MAX
}

pub fn loss(kind: LossKind, a: f64, z: f64) -> f64 {
    match kind {
        LossKind::Squared => squared_loss(a, z),
        LossKind::ClippedScaled => clipped_scaled_loss(a, z),
    }
}

/// `(1/t) sum_i w_i L(h_a, z_i)`.
pub fn weighted_empirical_risk(weights: &[f64], a: f64, q_batch: &[f64], kind: LossKind) -> Result<f64> {
    check_len(weights, q_batch)?;
    Ok(compensated_sum(weights.iter().zip(q_batch).map(|(w, &z)| w * loss(kind, a, z))) / q_batch.len() as f64)
}

/// Posterior-averaged weighted risk with the clipped loss.
///
/// The clip is applied after averaging over `a`:
/// `min(E_rho[(1 - a)^2] z^2, L_max) / L_max`. For the posteriors used here
/// the clip only binds on events of negligible source probability, so the
/// interchange error is bounded by the mass of `{ z : z^2 > L_max / E_rho[(1-a)^2] }`.
pub fn posterior_risk(posterior: &GaussianPosterior, weights: &[f64], q_batch: &[f64], l_max: f64) -> Result<f64> {
    check_len(weights, q_batch)?;
    let k = posterior.expected_sq_gap();
    Ok(compensated_sum(weights.iter().zip(q_batch).map(|(w, &z)| w * (k * z * z).min(l_max) / l_max))
        / q_batch.len() as f64)
}

/// Per-sample terms of [`posterior_risk`], for prefix sums over `t`.
pub fn posterior_loss_terms(posterior: &GaussianPosterior, weights: &[f64], q_batch: &[f64], l_max: f64) -> Result<Vec<f64>> {
    check_len(weights, q_batch)?;
    let k = posterior.expected_sq_gap();
    Ok(weights.iter().zip(q_batch).map(|(w, &z)| w * (k * z * z).min(l_max) / l_max).collect())
}

/// `R_P(rho) / L_max = ((1 - a0)^2 + sigma^2)(1 + mu^2) / L_max`.
pub fn posterior_target_risk(posterior: &GaussianPosterior, mu: f64, l_max: f64) -> f64 {
    posterior.expected_sq_gap() * (1.0 + mu * mu) / l_max
}

fn check_len(weights: &[f64], q_batch: &[f64]) -> Result<()> {
    if weights.len() != q_batch.len() {
        return Err(Error::LengthMismatch {
            expected: q_batch.len(),
            got: weights.len(),
        });
    }
    Ok(())
}
