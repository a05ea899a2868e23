//! The one-dimensional Gaussian mean-shift instance.
//!
//! Source `Q = N(0, 1)`, target `P_mu = N(mu, 1)`. Every quantity the patch
//! test compares against (the ratio, its moments, ESS, target risks) has a
//! closed form here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub mu: f64,
    pub n_q: usize,
    pub n_p: usize,
    pub seed: u64,
}

impl ShiftConfig {
    pub fn new(mu: f64, n_q: usize, n_p: usize, seed: u64) -> Result<Self> {
        let c = Self { mu, n_q, n_p, seed };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::InvalidConfig(format!("mu = {} is not finite", self.mu)));
        }
        if self.n_q == 0 || self.n_p == 0 {
            return Err(Error::InvalidConfig("sample counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Law {
    Source,
    Target,
}

impl Law {
    fn tag(self) -> u64 {
        match self {
            Law::Source => 0x51,
            Law::Target => 0x50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub values: Vec<f64>,
    pub law: Law,
    pub seed_used: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Draw the source (`N(0,1)`) or target (`N(mu,1)`) batch for `config`.
///
/// The stream seed is derived from `(config.seed, law)`, so the two laws are
/// independent and each is reproducible on its own.
pub fn sample(config: &ShiftConfig, law: Law) -> SampleBatch {
    let seed_used = derive_seed(config.seed, &[law.tag()]);
    let mut stream = Stream::new(seed_used);
    let (n, shift) = match law {
        Law::Source => (config.n_q, 0.0),
        Law::Target => (config.n_p, config.mu),
    };
    let values = (0..n).map(|_| shift + stream.normal()).collect();
    SampleBatch {
        values,
        law,
        seed_used,
    }
}

/// Ratio value with an overflow flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioValue {
    pub value: f64,
    pub saturated: bool,
}

/// `r*_mu(z) = exp(mu z - mu^2 / 2)`, saturating at `f64::MAX`.
pub fn true_ratio_checked(z: f64, mu: f64) -> RatioValue {
    let e = mu * z - 0.5 * mu * mu;
    let v = e.exp();
    if v.is_finite() {
        RatioValue {
            value: v.max(f64::MIN_POSITIVE),
            saturated: false,
        }
    } else {
        RatioValue {
            value: f64::MAX,
            saturated: true,
        }
    }
}

pub fn true_ratio(z: f64, mu: f64) -> f64 {
    true_ratio_checked(z, mu).value
}

/// Oracle weights `r*_mu(z_i)` for a batch.
pub fn true_ratios(zs: &[f64], mu: f64) -> Vec<f64> {
    zs.iter().map(|&z| true_ratio(z, mu)).collect()
}

/// Population identities of `r*_mu` under `Q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityTable {
    pub norm: f64,
    pub second_moment: f64,
    pub first_moment_transport: f64,
    pub second_moment_transport: f64,
    pub ess_fraction: f64,
}

pub fn analytic_identities(mu: f64) -> IdentityTable {
    let m2 = mu * mu;
    IdentityTable {
        norm: 1.0,
        second_moment: m2.exp(),
        first_moment_transport: mu,
        second_moment_transport: 1.0 + m2,
        ess_fraction: (-m2).exp(),
    }
}

/// Per-sample variances under `Q` of `r*`, `r* z` and `r* z^2`.
///
/// Uses `E_Q[r*^2 g(Z)] = e^{mu^2} E_{N(2mu,1)}[g]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportVariances {
    pub norm: f64,
    pub first: f64,
    pub second: f64,
}

pub fn transport_variances(mu: f64) -> TransportVariances {
    let m2 = mu * mu;
    let e = m2.exp();
    TransportVariances {
        norm: e - 1.0,
        first: e * (1.0 + 4.0 * m2) - m2,
        second: e * (16.0 * m2 * m2 + 24.0 * m2 + 3.0) - (1.0 + m2).powi(2),
    }
}

/// `R_{P_mu}(h_a) = (1 - a)^2 (1 + mu^2)` for the squared loss.
pub fn target_risk(a: f64, mu: f64) -> f64 {
    (1.0 - a).powi(2) * (1.0 + mu * mu)
}

/// Monte Carlo standard error of the empirical target risk at sample size `n`.
pub fn sigma_mc(a: f64, mu: f64, n: usize) -> f64 {
    (1.0 - a).powi(2) * ((2.0 + 4.0 * mu * mu) / n as f64).sqrt()
}
