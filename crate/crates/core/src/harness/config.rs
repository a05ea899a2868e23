//! Campaign configuration (TOML). Every field has the pre-registered default,
//! so an empty file is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub base_seed: u64,
    /// Tolerance file; relative paths resolve against the config file. The
    /// bundled registry is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registry: Option<PathBuf>,
    pub identity: IdentityConfig,
    pub fit: FitConfig,
    pub tail: TailConfig,
    pub risk: RiskConfig,
    pub coverage: CoverageConfig,
    pub anytime: AnytimeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentityConfig {
    pub mu: f64,
    pub n: usize,
}

/// Shared by S1-S3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub mu: f64,
    pub n: usize,
    pub steps: usize,
    pub seeds: usize,
    /// Record `L^2(Q)` in the trace every this many steps (0 = never).
    pub l2q_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailConfig {
    pub mus: Vec<f64>,
    /// Clip threshold per entry of `mus`.
    pub clips: Vec<f64>,
    pub n: usize,
    pub steps: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub mus: Vec<f64>,
    pub predictors: Vec<f64>,
    pub n: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorConfig {
    pub a0: f64,
    pub sigma2: f64,
    pub prior_a0: f64,
    pub prior_sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub mu: f64,
    pub replicates: usize,
    pub t: usize,
    /// Sample sizes of the rate check (prefixes of each replicate).
    pub rate_ts: Vec<usize>,
    pub delta: f64,
    pub posterior: PosteriorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnytimeConfig {
    pub mu: f64,
    pub replicates: usize,
    pub t_min: u64,
    pub t_max: u64,
    pub stride: u64,
    pub b: f64,
    pub delta: f64,
    pub posterior: PosteriorConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            base_seed: 20_240_917,
            registry: None,
            identity: IdentityConfig::default(),
            fit: FitConfig::default(),
            tail: TailConfig::default(),
            risk: RiskConfig::default(),
            coverage: CoverageConfig::default(),
            anytime: AnytimeConfig::default(),
        }
    }
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self { mu: 0.5, n: 10_000 }
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            n: 10_000,
            steps: 2000,
            seeds: 5,
            l2q_every: 100,
        }
    }
}

impl Default for TailConfig {
    fn default() -> Self {
        Self {
            mus: vec![1.5, 2.0],
            clips: vec![20.0, 60.0],
            n: 10_000,
            steps: 2000,
            seeds: 3,
        }
    }
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            mus: vec![0.5, 1.5],
            predictors: crate::risk::PREDICTOR_GRID.to_vec(),
            n: 10_000,
            seeds: 10,
        }
    }
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            a0: 0.5,
            sigma2: 0.01,
            prior_a0: 0.0,
            prior_sigma2: 1.0,
        }
    }
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            replicates: 200,
            t: 10_000,
            rate_ts: vec![100, 1000, 10_000],
            delta: 0.05,
            posterior: PosteriorConfig::default(),
        }
    }
}

impl Default for AnytimeConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            replicates: 100,
            t_min: 100,
            t_max: 1000,
            stride: 1,
            b: 2.0,
            delta: 0.05,
            posterior: PosteriorConfig::default(),
        }
    }
}

impl CampaignConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Load and resolve the registry path relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::parse(&std::fs::read_to_string(path)?)?;
        if let (Some(r), Some(dir)) = (&c.registry, path.parent()) {
            if r.is_relative() {
                c.registry = Some(dir.join(r));
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.identity.n < 2 || self.fit.n < 2 || self.tail.n < 2 || self.risk.n < 2 {
            return bad("sample sizes must be at least 2");
        }
        if self.fit.seeds == 0 || self.tail.seeds == 0 || self.risk.seeds == 0 {
            return bad("seed counts must be positive");
        }
        if self.fit.steps == 0 || self.tail.steps == 0 {
            return bad("training steps must be positive");
        }
        if self.tail.mus.len() != self.tail.clips.len() {
            return bad("tail.mus and tail.clips must have equal length");
        }
        if self.tail.clips.iter().any(|c| !(*c > 0.0)) {
            return bad("clip thresholds must be positive");
        }
        if self.coverage.replicates == 0 || self.anytime.replicates == 0 {
            return bad("replicate counts must be positive");
        }
        if self.coverage.rate_ts.iter().any(|&t| t == 0 || t > self.coverage.t) {
            return bad("rate_ts must lie in [1, coverage.t]");
        }
        if self.anytime.t_max < self.anytime.t_min || self.anytime.stride == 0 {
            return bad("anytime horizon must satisfy t_min <= t_max and stride >= 1");
        }
        for d in [self.coverage.delta, self.anytime.delta] {
            if !(d > 0.0 && d < 1.0) {
                return bad("delta must lie in (0, 1)");
            }
        }
        for p in [&self.coverage.posterior, &self.anytime.posterior] {
            if !(p.sigma2 > 0.0 && p.prior_sigma2 > 0.0) {
                return bad("posterior variances must be positive");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(CampaignConfig::parse("").unwrap(), CampaignConfig::default());
    }

    #[test]
    fn overrides_and_rejections() {
        let c = CampaignConfig::parse("base_seed = 7\n[fit]\nsteps = 10\n").unwrap();
        assert_eq!(c.base_seed, 7);
        assert_eq!(c.fit.steps, 10);
        assert_eq!(c.fit.n, 10_000);
        assert!(CampaignConfig::parse("[fit]\nsteps = 0\n").is_err());
        assert!(CampaignConfig::parse("[fit]\nunknown = 1\n").is_err());
        assert!(CampaignConfig::parse("[tail]\nclips = [1.0]\n").is_err());
    }
}
