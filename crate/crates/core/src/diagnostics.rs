//! Importance-weight diagnostics: ESS, second moment, and the `L^2(Q)`
//! distance of a ratio model to the analytic ratio.
//!
//! Sums use Neumaier compensation. At `mu = 2` a handful of weights carry
//! most of the mass and naive accumulation visibly drifts.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lab::true_ratio;

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut k = KahanSum::default();
    for x in xs {
        k.add(x);
    }
    k.value()
}

pub fn mean(xs: &[f64]) -> f64 {
    compensated_sum(xs.iter().copied()) / xs.len() as f64
}

/// Nonnegative finite importance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::NonFinite(format!("weight {i} = {} is not a finite nonnegative value", values[i])));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for WeightVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub mean: f64,
    pub second_moment: f64,
    pub ess_abs: f64,
    pub ess_fraction: f64,
    pub count: usize,
}

/// `(ESS, ESS / t)` with `ESS = (sum w)^2 / sum w^2`.
pub fn ess(weights: &[f64]) -> Result<(f64, f64)> {
    let mut s1 = KahanSum::default();
    let mut s2 = KahanSum::default();
    for &w in weights {
        s1.add(w);
        s2.add(w * w);
    }
    let (s1, s2) = (s1.value(), s2.value());
    if s2 <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    // (sum w)^2 <= t sum w^2 holds exactly; clamp away float round-off.
    let t = weights.len() as f64;
    let e = (s1 * s1 / s2).clamp(1.0, t);
    Ok((e, e / t))
}

/// Mean of squared weights.
pub fn second_moment(weights: &[f64]) -> f64 {
    compensated_sum(weights.iter().map(|w| w * w)) / weights.len() as f64
}

/// Mean, second moment and ESS in one pass.
pub fn diagnose(weights: &[f64]) -> Result<DiagnosticsReport> {
    let mut s1 = KahanSum::default();
    let mut s2 = KahanSum::default();
    for &w in weights {
        s1.add(w);
        s2.add(w * w);
    }
    let n = weights.len();
    let (s1, s2) = (s1.value(), s2.value());
    if s2 <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    let ess_abs = (s1 * s1 / s2).clamp(1.0, n as f64);
    Ok(DiagnosticsReport {
        mean: s1 / n as f64,
        second_moment: s2 / n as f64,
        ess_abs,
        ess_fraction: ess_abs / n as f64,
        count: n,
    })
}

/// Root mean squared distance to `r*_mu` over a source batch, from weights
/// already evaluated on that batch.
pub fn l2q_error_from_weights(weights: &[f64], mu: f64, q_batch: &[f64]) -> Result<f64> {
    if weights.len() != q_batch.len() {
        return Err(Error::LengthMismatch {
            expected: q_batch.len(),
            got: weights.len(),
        });
    }
    let ss = compensated_sum(weights.iter().zip(q_batch).map(|(w, &z)| {
        let d = w - true_ratio(z, mu);
        d * d
    }));
    Ok((ss / q_batch.len() as f64).sqrt())
}

/// `||r - r*_mu||_{L^2(Q)}` estimated on `q_batch`, for any ratio function.
pub fn l2q_error<F: Fn(&[f64]) -> Vec<f64>>(ratio: F, mu: f64, q_batch: &[f64]) -> Result<f64> {
    l2q_error_from_weights(&ratio(q_batch), mu, q_batch)
}

/// Pre-registered `L^2(Q)` accuracy threshold.
pub const TAU_L2: f64 = 0.05;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::{sample, true_ratios, Law, ShiftConfig};
    use crate::net::RatioModel;
    use crate::transforms::clip_weights;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn ess_examples() {
        let (e, f) = ess(&[3.0; 17]).unwrap();
        assert_relative_eq!(e, 17.0, max_relative = 1e-14);
        assert_relative_eq!(f, 1.0, max_relative = 1e-14);
        let mut v = vec![0.0; 9];
        v[0] = 1.0;
        assert_eq!(ess(&v).unwrap().0, 1.0);
        assert_relative_eq!(ess(&[2.0, 1.0, 1.0]).unwrap().0, 16.0 / 6.0, max_relative = 1e-14);
        assert!(matches!(ess(&[0.0, 0.0]), Err(Error::ZeroWeights)));
    }

    #[test]
    fn second_moment_examples() {
        assert_eq!(second_moment(&[1.0; 5]), 1.0);
        assert_eq!(second_moment(&[0.0, 2.0]), 2.0);
        let n = 100_000;
        let c = ShiftConfig::new(0.5, n, n, 3).unwrap();
        let q = sample(&c, Law::Source);
        let w = true_ratios(&q.values, 0.5);
        let target = 0.25f64.exp();
        assert!((second_moment(&w) - target).abs() / target <= 0.10);
    }

    #[test]
    fn asymptotic_ess_fraction() {
        let n = 100_000;
        for mu in [0.5, 1.5] {
            let c = ShiftConfig::new(mu, n, n, 17).unwrap();
            let q = sample(&c, Law::Source);
            let w = true_ratios(&q.values, mu);
            let (_, f) = ess(&w).unwrap();
            let target = (-mu * mu as f64).exp();
            assert!((f - target).abs() / target <= 0.20, "mu={mu}: {f} vs {target}");
        }
    }

    #[test]
    fn l2q_examples() {
        let n = 50_000;
        let mu = 0.5;
        let c = ShiftConfig::new(mu, n, n, 8).unwrap();
        let q = sample(&c, Law::Source);
        let exact = l2q_error(|zs| true_ratios(zs, mu), mu, &q.values).unwrap();
        assert_eq!(exact, 0.0);

        // r == 1: E_Q[(1 - r*)^2] = e^{mu^2} - 1
        let sq = l2q_error(|zs| vec![1.0; zs.len()], mu, &q.values).unwrap().powi(2);
        let pop = (mu * mu).exp_m1();
        // Var_Q[(1 - r*)^2] from E_Q[r*^k] = e^{k(k-1) mu^2 / 2}
        let m = |k: f64| (k * (k - 1.0) * mu * mu / 2.0).exp();
        let fourth = 1.0 - 4.0 * m(1.0) + 6.0 * m(2.0) - 4.0 * m(3.0) + m(4.0);
        let se = ((fourth - pop * pop) / n as f64).sqrt();
        assert!((sq - pop).abs() <= 4.0 * se, "{sq} vs {pop}");
        assert_relative_eq!(pop.sqrt(), 0.5329, epsilon = 1e-4);
        assert!(pop.sqrt() > TAU_L2);
    }

    #[test]
    fn l2q_of_network_is_nonnegative() {
        let m = RatioModel::init(&[1, 4, 1], 1e-3, 1).unwrap();
        let zs = [0.0, 1.0, -1.0];
        assert!(l2q_error(|z| m.evaluate(z), 0.5, &zs).unwrap() >= 0.0);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut xs = vec![1e16];
        xs.extend(std::iter::repeat(1.0).take(1000));
        xs.push(-1e16);
        assert_eq!(compensated_sum(xs.iter().copied()), 1000.0);
    }

    fn weights() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1e3, 1..200).prop_filter("some positive", |v| v.iter().any(|&w| w > 0.0))
    }

    proptest! {
        #[test]
        fn ess_bounds(w in weights()) {
            let (e, f) = ess(&w).unwrap();
            prop_assert!(e >= 1.0 && e <= w.len() as f64);
            prop_assert!((f - e / w.len() as f64).abs() < 1e-15);
        }

        #[test]
        fn clipping_never_lowers_ess(w in weights(), c in 1e-3f64..1e3) {
            let clipped = clip_weights(&w, c).unwrap();
            let (_, before) = ess(&w).unwrap();
            let (_, after) = ess(&clipped).unwrap();
            prop_assert!(after >= before * (1.0 - 1e-12), "{} < {}", after, before);
        }
    }
}
