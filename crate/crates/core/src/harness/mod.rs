//! Pre-registered patch-test campaign: stages S0-S7, tolerance checks, and
//! immutable JSON artifacts.
//!
//! Each stage writes `<out>/<stage>.json`. Stages S2-S4 read their
//! predecessor's artifact from the same directory.

pub mod artifact;
pub mod config;
pub mod csv_mode;
pub mod registry;
pub mod report;
mod stages;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use artifact::{canonical_json, emit_artifact, load_artifact};
pub use config::CampaignConfig;
pub use csv_mode::{run_csv_mode, CsvConfig};
pub use registry::{check_rule, CriterionResult, OracleContext, Registry, RuleKind, ToleranceRule, Verdict};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    S0,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
    S7,
    /// Two-sample CSV run; registers no criteria.
    #[serde(rename = "CSV")]
    Csv,
}

impl Stage {
    pub const ALL: [Stage; 8] = [Stage::S0, Stage::S1, Stage::S2, Stage::S3, Stage::S4, Stage::S5, Stage::S6, Stage::S7];

    pub fn index(self) -> u64 {
        match self {
            Stage::Csv => 8,
            s => Self::ALL.iter().position(|x| *x == s).unwrap() as u64,
        }
    }

    /// Stage whose artifact must exist before this one runs.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::S2 => Some(Stage::S1),
            Stage::S3 => Some(Stage::S2),
            Stage::S4 => Some(Stage::S3),
            _ => None,
        }
    }

    /// Inclusive range such as `S0:S7`, or a single stage.
    pub fn parse_range(s: &str) -> Result<Vec<Stage>> {
        let (a, b) = match s.split_once(':') {
            Some((a, b)) => (a.parse::<Stage>()?, b.parse::<Stage>()?),
            None => {
                let x = s.parse::<Stage>()?;
                (x, x)
            }
        };
        if a == Stage::Csv || b == Stage::Csv || a > b {
            return Err(Error::InvalidConfig(format!("invalid stage range {s}")));
        }
        Ok(Self::ALL.iter().copied().filter(|x| *x >= a && *x <= b).collect())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Csv => f.write_str("CSV"),
            s => write!(f, "S{}", s.index()),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        if t == "CSV" {
            return Ok(Stage::Csv);
        }
        t.strip_prefix('S')
            .and_then(|d| d.parse::<usize>().ok())
            .and_then(|i| Self::ALL.get(i).copied())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// `NO-ORACLE` for CSV runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub registry_hash: String,
    pub config: serde_json::Value,
    /// Per-seed / per-replicate diagnostics and summaries.
    pub diagnostics: serde_json::Value,
    pub criteria: Vec<CriterionResult>,
    /// Published values kept for comparison only; never thresholds.
    #[serde(default)]
    pub reference_annotations: std::collections::BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_hash: Option<String>,
}

impl StageReport {
    /// Exact set equality between reported and registered criteria.
    pub fn validate(&self, registry: &Registry) -> Result<()> {
        if self.registry_hash != registry.hash {
            return Err(Error::Incomplete(format!(
                "{}: report was checked against registry {}, not {}",
                self.stage, self.registry_hash, registry.hash
            )));
        }
        let mut got: Vec<&str> = self.criteria.iter().map(|c| c.id.as_str()).collect();
        got.sort_unstable();
        if got.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Incomplete(format!("{}: a criterion is reported twice", self.stage)));
        }
        let mut want = registry.registered_ids(self.stage);
        want.sort_unstable();
        if got != want.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Incomplete(format!("{}: reported {:?}, registered {:?}", self.stage, got, want)));
        }
        Ok(())
    }

    pub fn all_pass(&self) -> bool {
        self.criteria.iter().all(|c| c.verdict == Verdict::Pass)
    }

    pub fn criterion(&self, id: &str) -> Option<&CriterionResult> {
        self.criteria.iter().find(|c| c.id == id)
    }
}

pub fn artifact_path(dir: &Path, stage: Stage) -> std::path::PathBuf {
    dir.join(format!("{stage}.json"))
}

/// Registry named by the config, or the bundled one.
pub fn load_registry(config: &CampaignConfig) -> Result<Registry> {
    match &config.registry {
        Some(p) => Registry::load(p),
        None => Ok(Registry::default_registry()),
    }
}

/// Run one stage, emit its artifact under `out_dir` and return the report.
pub fn run_stage(stage: Stage, config: &CampaignConfig, registry: &Registry, out_dir: &Path) -> Result<StageReport> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let prior = match stage.prerequisite() {
        Some(p) => {
            let path = artifact_path(out_dir, p);
            if !path.exists() {
                return Err(Error::MissingPrerequisite(format!("{stage} needs {} at {}", p, path.display())));
            }
            let r = load_artifact(&path)?;
            if r.registry_hash != registry.hash {
                return Err(Error::MissingPrerequisite(format!("{p} artifact was produced under a different registry")));
            }
            Some(r)
        }
        None => None,
    };
    let mut report = stages::run(stage, config, registry, prior.as_ref(), out_dir)?;
    let hash = emit_artifact(&mut report, registry, &artifact_path(out_dir, stage))?;
    debug_assert_eq!(report.artifact_hash.as_deref(), Some(hash.as_str()));
    Ok(report)
}

/// Run `stages` in order, stopping at the first error.
pub fn sweep(stages: &[Stage], config: &CampaignConfig, registry: &Registry, out_dir: &Path) -> Result<Vec<StageReport>> {
    stages.iter().map(|&s| run_stage(s, config, registry, out_dir)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names() {
        assert_eq!("s3".parse::<Stage>().unwrap(), Stage::S3);
        assert_eq!(Stage::S7.to_string(), "S7");
        assert!("S8".parse::<Stage>().is_err());
        assert_eq!(Stage::parse_range("S0:S7").unwrap(), Stage::ALL.to_vec());
        assert_eq!(Stage::parse_range("S5").unwrap(), vec![Stage::S5]);
        assert!(Stage::parse_range("S4:S2").is_err());
        assert_eq!(serde_json::to_string(&Stage::Csv).unwrap(), "\"CSV\"");
    }
}
