//! Pre-registered tolerance file.
//!
//! One TOML table per stage, each holding the criteria that stage must
//! report. The file's SHA-256 is embedded in every artifact; the runner reads
//! tolerances from here only and has no override.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Stage;
use crate::error::{Error, Result};

/// The registry shipped with the crate.
pub const DEFAULT_REGISTRY: &str = include_str!("../../registry/patch_test.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// `|value - oracle| <= param * sigma`.
    McBand,
    /// `|value - oracle| / |oracle| <= param`.
    Relative,
    /// `|value - oracle| <= param`.
    Absolute,
    /// `value >= param`.
    CoverageFloor,
    /// `value <= param`.
    FailureCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceRule {
    pub id: String,
    pub kind: RuleKind,
    /// k-multiplier, tau or threshold depending on `kind`.
    pub param: f64,
    /// Symbolic pointer to the oracle the stage supplies.
    pub reference: String,
    /// Literal oracle value, for references that are not analytic.
    #[serde(default)]
    pub target: Option<f64>,
    /// Turn the inequality strict.
    #[serde(default)]
    pub strict: bool,
}

impl ToleranceRule {
    pub fn validate(&self) -> Result<()> {
        if self.kind != RuleKind::FailureCap && self.kind != RuleKind::CoverageFloor && !(self.param > 0.0) {
            return Err(Error::InvalidConfig(format!("rule {}: parameter must be positive, got {}", self.id, self.param)));
        }
        if !self.param.is_finite() || self.param < 0.0 {
            return Err(Error::InvalidConfig(format!("rule {}: parameter must be finite and nonnegative", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
    /// The criterion could not be evaluated (non-finite inputs); not a pass.
    Flagged,
}

/// Oracle values a stage hands to [`check_rule`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OracleContext {
    pub oracle: Option<f64>,
    pub sigma: Option<f64>,
}

impl OracleContext {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn value(oracle: f64) -> Self {
        Self {
            oracle: Some(oracle),
            sigma: None,
        }
    }

    pub fn band(oracle: f64, sigma: f64) -> Self {
        Self {
            oracle: Some(oracle),
            sigma: Some(sigma),
        }
    }
}

/// Both sides of the checked inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: String,
    pub kind: RuleKind,
    #[serde(with = "nullable_f64")]
    pub value: f64,
    pub oracle: Option<f64>,
    /// Left-hand side of the inequality (the statistic compared).
    #[serde(with = "nullable_f64")]
    pub lhs: f64,
    /// Right-hand side (the tolerance).
    #[serde(with = "nullable_f64")]
    pub rhs: f64,
    pub verdict: Verdict,
}

/// JSON has no NaN; non-finite values are written as `null` and read back as NaN.
mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

pub fn check_rule(value: f64, rule: &ToleranceRule, ctx: OracleContext) -> Result<CriterionResult> {
    rule.validate()?;
    let oracle = ctx.oracle.or(rule.target);
    let need_oracle = || oracle.ok_or_else(|| Error::MissingOracle(rule.id.clone()));
    let (lhs, rhs, upper) = match rule.kind {
        RuleKind::McBand => {
            let o = need_oracle()?;
            let sigma = ctx.sigma.ok_or_else(|| Error::MissingOracle(format!("{} (sigma)", rule.id)))?;
            ((value - o).abs(), rule.param * sigma, true)
        }
        RuleKind::Relative => {
            let o = need_oracle()?;
            ((value - o).abs() / o.abs(), rule.param, true)
        }
        RuleKind::Absolute => ((value - oracle.unwrap_or(0.0)).abs(), rule.param, true),
        RuleKind::CoverageFloor => (value, rule.param, false),
        RuleKind::FailureCap => (value, rule.param, true),
    };
    let verdict = if !(lhs.is_finite() && rhs.is_finite()) {
        Verdict::Flagged
    } else {
        let ok = match (upper, rule.strict) {
            (true, false) => lhs <= rhs,
            (true, true) => lhs < rhs,
            (false, false) => lhs >= rhs,
            (false, true) => lhs > rhs,
        };
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    };
    Ok(CriterionResult {
        id: rule.id.clone(),
        kind: rule.kind,
        value,
        oracle,
        lhs,
        rhs,
        verdict,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRules {
    #[serde(default)]
    pub criteria: Vec<ToleranceRule>,
    /// Extra registered constants a stage needs (e.g. per-shift band widths).
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

// Stage tables are flattened; unknown table names fail in `Stage::from_str`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RegistryFile {
    version: u32,
    #[serde(flatten)]
    stages: BTreeMap<String, StageRules>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub version: u32,
    pub stages: BTreeMap<Stage, StageRules>,
    /// Hex SHA-256 of the registry source text.
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Registry {
    pub fn parse(text: &str) -> Result<Self> {
        let file: RegistryFile = toml::from_str(text)?;
        let mut stages = BTreeMap::new();
        for (name, rules) in file.stages {
            let stage: Stage = name.parse()?;
            if stage == Stage::Csv {
                return Err(Error::InvalidConfig("CSV runs register no criteria".into()));
            }
            let mut seen = std::collections::BTreeSet::new();
            for r in &rules.criteria {
                r.validate()?;
                if !seen.insert(r.id.clone()) {
                    return Err(Error::InvalidConfig(format!("{stage}: duplicate criterion {}", r.id)));
                }
            }
            stages.insert(stage, rules);
        }
        for s in Stage::ALL {
            if !stages.contains_key(&s) {
                return Err(Error::InvalidConfig(format!("registry has no table for {s}")));
            }
        }
        Ok(Self {
            version: file.version,
            stages,
            hash: sha256_hex(text.as_bytes()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn default_registry() -> Self {
        Self::parse(DEFAULT_REGISTRY).expect("bundled registry parses")
    }

    /// Rules of `stage`; stages without a table (CSV mode) register nothing.
    pub fn rules(&self, stage: Stage) -> Option<&StageRules> {
        self.stages.get(&stage)
    }

    pub fn registered_ids(&self, stage: Stage) -> Vec<String> {
        self.rules(stage).map_or_else(Vec::new, |r| r.criteria.iter().map(|c| c.id.clone()).collect())
    }

    pub fn rule(&self, stage: Stage, id: &str) -> Result<&ToleranceRule> {
        self.rules(stage)
            .and_then(|r| r.criteria.iter().find(|c| c.id == id))
            .ok_or_else(|| Error::InvalidConfig(format!("{stage}: criterion {id} is not registered")))
    }

    pub fn param(&self, stage: Stage, key: &str) -> Result<f64> {
        self.rules(stage)
            .and_then(|r| r.params.get(key).copied())
            .ok_or_else(|| Error::InvalidConfig(format!("{stage}: registry parameter {key} missing")))
    }
}
