//! Canonical JSON artifacts.
//!
//! Canonical form: object keys sorted (serde_json's default map is ordered),
//! no insignificant whitespace, floats in shortest round-trip decimal,
//! non-finite floats as `null`. The hash is SHA-256 of the canonical bytes of
//! the report with `artifact_hash` unset.

use std::path::Path;

use serde::Serialize;

use super::registry::{sha256_hex, Registry};
use super::StageReport;
use crate::error::{Error, Result};

pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // through Value so that struct fields are key-sorted too
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn report_hash(report: &StageReport) -> Result<String> {
    let mut r = report.clone();
    r.artifact_hash = None;
    Ok(sha256_hex(canonical_json(&r)?.as_bytes()))
}

/// Validate, hash and write `report` once. Rewriting identical bytes is a
/// no-op; a different report at an existing path is refused.
pub fn emit_artifact(report: &mut StageReport, registry: &Registry, path: &Path) -> Result<String> {
    report.validate(registry)?;
    let hash = report_hash(report)?;
    report.artifact_hash = Some(hash.clone());
    let bytes = canonical_json(report)?;
    if path.exists() {
        let existing = std::fs::read_to_string(path)?;
        if existing == bytes {
            return Ok(hash);
        }
        let old = serde_json::from_str::<StageReport>(&existing)
            .ok()
            .and_then(|r| r.artifact_hash)
            .unwrap_or_else(|| sha256_hex(existing.as_bytes()));
        return Err(Error::ArtifactConflict {
            path: path.display().to_string(),
            existing: old,
            new: hash,
        });
    }
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(hash)
}

/// Read an artifact and check its embedded hash.
pub fn load_artifact(path: &Path) -> Result<StageReport> {
    let r: StageReport = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let stored = r
        .artifact_hash
        .clone()
        .ok_or_else(|| Error::Schema(format!("{} has no artifact hash", path.display())))?;
    if report_hash(&r)? != stored {
        return Err(Error::Schema(format!("{} does not match its embedded hash", path.display())));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::super::registry::{CriterionResult, RuleKind, Verdict};
    use super::super::Stage;
    use super::*;

    fn registry() -> Registry {
        Registry::parse(
            r#"version = 1
[S0]
criteria = [{ id = "a", kind = "failure_cap", param = 1.0, reference = "x" }]
[S1]
[S2]
[S3]
[S4]
[S5]
[S6]
[S7]
"#,
        )
        .unwrap()
    }

    fn report(reg: &Registry, value: f64) -> StageReport {
        StageReport {
            stage: Stage::S0,
            label: None,
            registry_hash: reg.hash.clone(),
            config: serde_json::json!({"z": 1, "a": [0.1, 1e-300]}),
            diagnostics: serde_json::json!({"b": f64::NAN, "a": 0.30000000000000004}),
            criteria: vec![CriterionResult {
                id: "a".into(),
                kind: RuleKind::FailureCap,
                value,
                oracle: None,
                lhs: value,
                rhs: 1.0,
                verdict: if value <= 1.0 { Verdict::Pass } else { Verdict::Fail },
            }],
            reference_annotations: Default::default(),
            artifact_hash: None,
        }
    }

    #[test]
    fn canonical_form() {
        let s = canonical_json(&serde_json::json!({"b": 1, "a": {"d": 0.1, "c": 2.5e-8}})).unwrap();
        assert_eq!(s, r#"{"a":{"c":2.5e-8,"d":0.1},"b":1}"#);
        let x: f64 = 0.1 + 0.2;
        let back: f64 = serde_json::from_str(&canonical_json(&x).unwrap()).unwrap();
        assert_eq!(back.to_bits(), x.to_bits());
    }

    #[test]
    fn emit_is_idempotent_and_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let reg = registry();
        let path = dir.path().join("S0.json");
        let h1 = emit_artifact(&mut report(&reg, 0.5), &reg, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let h2 = emit_artifact(&mut report(&reg, 0.5), &reg, &path).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(bytes, std::fs::read(&path).unwrap());
        let loaded = load_artifact(&path).unwrap();
        assert_eq!(loaded.artifact_hash.as_deref(), Some(h1.as_str()));

        let err = emit_artifact(&mut report(&reg, 1.5), &reg, &path).unwrap_err();
        assert!(matches!(err, Error::ArtifactConflict { .. }));
        assert_ne!(report_hash(&report(&reg, 1.5)).unwrap(), h1);
    }

    #[test]
    fn incomplete_report_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let reg = registry();
        let mut r = report(&reg, 0.5);
        r.criteria.clear();
        assert!(matches!(emit_artifact(&mut r, &reg, &dir.path().join("x.json")), Err(Error::Incomplete(_))));
        let mut r = report(&reg, 0.5);
        let dup = r.criteria[0].clone();
        r.criteria.push(dup);
        assert!(matches!(r.validate(&reg), Err(Error::Incomplete(_))));
    }

    #[test]
    fn tampered_artifact_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let reg = registry();
        let path = dir.path().join("S0.json");
        emit_artifact(&mut report(&reg, 0.5), &reg, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("PASS", "FAIL");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_artifact(&path), Err(Error::Schema(_))));
    }
}
