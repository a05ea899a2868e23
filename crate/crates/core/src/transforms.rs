//! Post-training weight transforms.
//!
//! Normalization and clipping keep the weights usable as a change of
//! measure (after renormalization). Tempering does not: `E_Q[r^beta] < 1`
//! for any non-degenerate normalized `r` and `beta < 1`, so it is only ever
//! applied inside the training objective.

use crate::diagnostics::{mean, WeightVector};
use crate::error::{Error, Result};

/// Divide by the sample mean so the weights average exactly one.
pub fn posthoc_normalize(weights: &[f64]) -> Result<WeightVector> {
    let m = mean(weights);
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::NonPositiveMean(m));
    }
    WeightVector::new(weights.iter().map(|w| w / m).collect())
}

/// Elementwise `min(w, c)`.
pub fn clip_weights(weights: &[f64], c: f64) -> Result<WeightVector> {
    if !(c > 0.0) {
        return Err(Error::InvalidConfig(format!("clip threshold must be positive, got {c}")));
    }
    WeightVector::new(weights.iter().map(|&w| w.min(c)).collect())
}

/// Elementwise `w^beta` for `beta` in `(0, 1]`.
pub fn temper_weights(weights: &[f64], beta: f64) -> Result<WeightVector> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidConfig(format!("tempering exponent must lie in (0, 1], got {beta}")));
    }
    WeightVector::new(weights.iter().map(|&w| w.powf(beta)).collect())
}

/// Default clipping thresholds of the stress regimes.
pub fn default_clip_threshold(mu: f64) -> Option<f64> {
    if (mu - 1.5).abs() < 1e-12 {
        Some(20.0)
    } else if (mu - 2.0).abs() < 1e-12 {
        Some(60.0)
    } else {
        None
    }
}
