//! Summary table over the artifacts of an output directory.

use std::fmt::Write as _;
use std::path::Path;

use super::{load_artifact, Stage, StageReport};
use crate::error::Result;

/// Every `<stage>.json` present in `dir`, in stage order (CSV last).
pub fn collect(dir: &Path) -> Result<Vec<StageReport>> {
    let mut out = Vec::new();
    for stage in Stage::ALL.iter().copied().chain([Stage::Csv]) {
        let path = super::artifact_path(dir, stage);
        if path.exists() {
            out.push(load_artifact(&path)?);
        }
    }
    Ok(out)
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        "NaN".into()
    }
}

/// One row per criterion: stage, id, kind, value, lhs, rhs, verdict.
pub fn rows(reports: &[StageReport]) -> Vec<[String; 7]> {
    let mut rows = Vec::new();
    for r in reports {
        if r.criteria.is_empty() {
            let label = r.label.clone().unwrap_or_default();
            rows.push([r.stage.to_string(), "-".into(), "-".into(), "-".into(), "-".into(), "-".into(), label]);
        }
        for c in &r.criteria {
            rows.push([
                r.stage.to_string(),
                c.id.clone(),
                serde_json::to_value(c.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
                num(c.value),
                num(c.lhs),
                num(c.rhs),
                format!("{:?}", c.verdict).to_uppercase(),
            ]);
        }
    }
    rows
}

const HEADER: [&str; 7] = ["stage", "criterion", "kind", "value", "lhs", "rhs", "verdict"];

pub fn render_text(reports: &[StageReport]) -> String {
    let rows = rows(reports);
    let mut width = HEADER.map(str::len);
    for r in &rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells.iter().zip(width).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(&mut s, &HEADER);
    for r in &rows {
        line(&mut s, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let total = reports.iter().map(|r| r.criteria.len()).sum::<usize>();
    let passed = reports.iter().flat_map(|r| &r.criteria).filter(|c| c.verdict == super::Verdict::Pass).count();
    let _ = writeln!(s, "\n{passed}/{total} criteria PASS");
    s
}

pub fn render_csv(reports: &[StageReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for r in rows(reports) {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::error::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
