//! Two-sample CSV mode: fit the ratio network on user data, report weight
//! diagnostics and certificates for a declared bounded loss column. No
//! analytic oracle exists, so no criteria are evaluated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Registry, Stage, StageReport};
use crate::certificates::{anytime_bound, fixed_bound, PeelingSchedule};
use crate::constraints::{train_on, ConstraintMode, TailMode, TestFunction, TrainConfig};
use crate::diagnostics::{compensated_sum, diagnose};
use crate::error::{Error, Result};
use crate::lab::ShiftConfig;

pub const NO_ORACLE: &str = "NO-ORACLE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvConfig {
    /// Feature columns; defaults to every source column except `loss_column`.
    pub features: Option<Vec<String>>,
    /// Source column holding a loss in `[0, 1]`. Bounds are skipped when absent.
    pub loss_column: Option<String>,
    pub steps: usize,
    pub seed: u64,
    pub constraint_mode: ConstraintMode,
    pub clip: Option<f64>,
    pub delta: f64,
    pub t_min: u64,
    pub b: f64,
}

impl Default for CsvConfig {
    fn default() -> Self {
        Self {
            features: None,
            loss_column: None,
            steps: 2000,
            seed: 20_240_917,
            constraint_mode: ConstraintMode::NormMoments,
            clip: None,
            delta: 0.05,
            t_min: 100,
            b: 2.0,
        }
    }
}

impl CsvConfig {
    /// Training setup for `n_q` source and `n_p` target rows. `shift.mu` is a
    /// placeholder; only the sample counts and seed are used.
    pub fn train_config(&self, n_q: usize, n_p: usize) -> Result<TrainConfig> {
        let mut tc = TrainConfig::patch_test(0.0, self.seed, self.constraint_mode);
        tc.steps = self.steps;
        tc.shift = ShiftConfig::new(0.0, n_q, n_p, self.seed)?;
        if let Some(c) = self.clip {
            tc.tail_mode = TailMode::Clip { c };
        }
        Ok(tc)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// A parsed numeric table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Rows dropped because some entry was NaN or infinite.
    pub rejected: usize,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        Self::from_reader(std::fs::File::open(path)?, &name)
    }

    pub fn from_reader<R: std::io::Read>(input: R, name: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
            return Err(Error::Schema(format!("{name}: empty file")));
        }
        let mut rows = Vec::new();
        let mut rejected = 0;
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let mut row = Vec::with_capacity(rec.len());
            for (col, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Schema(format!("{name}: non-numeric value {field:?} in column {} (data row {})", headers[col], line + 1))
                })?;
                row.push(v);
            }
            if row.iter().all(|v| v.is_finite()) {
                rows.push(row);
            } else {
                rejected += 1;
            }
        }
        if rows.is_empty() {
            return Err(Error::Schema(format!("{name}: no usable rows")));
        }
        Ok(Self { headers, rows, rejected })
    }

    fn column_index(&self, col: &str, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::Schema(format!("{name}: missing column {col:?}")))
    }

    fn select(&self, idx: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((self.rows.len(), idx.len()), |(i, j)| self.rows[i][idx[j]])
    }
}

/// First and second moment of every feature.
pub fn test_functions(d: usize) -> Vec<TestFunction> {
    (0..d)
        .flat_map(|f| [TestFunction { feature: f, power: 1 }, TestFunction { feature: f, power: 2 }])
        .collect()
}

/// Fit on two tables and build the NO-ORACLE report.
pub fn analyze(source: &Table, target: &Table, config: &CsvConfig, registry: &Registry, inputs: serde_json::Value) -> Result<StageReport> {
    let features: Vec<String> = match &config.features {
        Some(f) => f.clone(),
        None => source
            .headers
            .iter()
            .filter(|h| Some(*h) != config.loss_column.as_ref())
            .cloned()
            .collect(),
    };
    if features.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    let src_idx = features.iter().map(|f| source.column_index(f, "source")).collect::<Result<Vec<_>>>()?;
    let tgt_idx = features.iter().map(|f| target.column_index(f, "target")).collect::<Result<Vec<_>>>()?;
    let loss = match &config.loss_column {
        Some(col) => {
            let k = source.column_index(col, "source")?;
            let v: Vec<f64> = source.rows.iter().map(|r| r[k]).collect();
            if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::Schema(format!("loss column {col:?} must lie in [0, 1], found {bad}")));
            }
            Some(v)
        }
        None => None,
    };
    let q = source.select(&src_idx);
    let p = target.select(&tgt_idx);

    let tc = config.train_config(q.nrows(), p.nrows())?;
    let out = train_on(&tc, q.view(), p.view(), test_functions(features.len()), None)?;
    let w = out.deployed.evaluate_rows(q.view());
    let d = diagnose(&w)?;

    let mut diagnostics = json!({
        "inputs": inputs,
        "features": features,
        "rows": { "source": q.nrows(), "target": p.nrows() },
        "rejected_rows": { "source": source.rejected, "target": target.rejected },
        "weights": d,
        "status": out.status,
        "final_residuals": out.final_residuals,
        "duals": { "lambda": out.duals.lambda, "mus": out.duals.mus },
        "steps_run": out.trace.len(),
    });
    if let Some(loss) = loss {
        let t = loss.len() as u64;
        let emp = compensated_sum(w.iter().zip(&loss).map(|(w, l)| w * l)) / t as f64;
        // A single fixed predictor: KL = 0.
        let emp_c = emp.min(1.0);
        let schedule = PeelingSchedule::new(config.t_min, config.b, config.delta)?;
        let any = |bern| anytime_bound(emp_c, 0.0, t, &schedule, bern).ok();
        diagnostics["certificates"] = json!({
            "weighted_emp_risk": emp,
            "sqrt": fixed_bound(emp_c, 0.0, t, config.delta, false),
            "bernoulli_kl": fixed_bound(emp_c, 0.0, t, config.delta, true),
            "anytime_sqrt": any(false),
            "anytime_bernoulli_kl": any(true),
        });
    }
    Ok(StageReport {
        stage: Stage::Csv,
        label: Some(NO_ORACLE.into()),
        registry_hash: registry.hash.clone(),
        config: serde_json::to_value(config)?,
        diagnostics,
        criteria: Vec::new(),
        reference_annotations: BTreeMap::new(),
        artifact_hash: None,
    })
}


/// Read both files, fit, and write `<out>/CSV.json`.
pub fn run_csv_mode(source: &Path, target: &Path, config: &CsvConfig, registry: &Registry, out_dir: &Path) -> Result<(StageReport, PathBuf)> {
    let s = Table::read(source)?;
    let t = Table::read(target)?;
    let inputs = json!({
        "source": source.file_name().map(|f| f.to_string_lossy().into_owned()),
        "target": target.file_name().map(|f| f.to_string_lossy().into_owned()),
    });
    let mut report = analyze(&s, &t, config, registry, inputs)?;
    std::fs::create_dir_all(out_dir)?;
    let path = super::artifact_path(out_dir, Stage::Csv);
    super::emit_artifact(&mut report, registry, &path)?;
    Ok((report, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_nonfinite_rows() {
        let t = Table::from_reader("x,y\n1,2\nNaN,3\n4,inf\n5,6\n".as_bytes(), "s").unwrap();
        assert_eq!(t.rows, vec![vec![1.0, 2.0], vec![5.0, 6.0]]);
        assert_eq!(t.rejected, 2);
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(Table::from_reader("".as_bytes(), "s"), Err(Error::Schema(_))));
        assert!(matches!(Table::from_reader("x\n".as_bytes(), "s"), Err(Error::Schema(_))));
        let e = Table::from_reader("x\nabc\n".as_bytes(), "s").unwrap_err();
        assert!(e.to_string().contains("column x"), "{e}");
        // ragged rows
        assert!(Table::from_reader("x,y\n1,2\n3\n".as_bytes(), "s").is_err());

        let s = Table::from_reader("x,loss\n1,0.5\n".as_bytes(), "s").unwrap();
        let t = Table::from_reader("z\n1\n".as_bytes(), "t").unwrap();
        let cfg = CsvConfig {
            loss_column: Some("loss".into()),
            steps: 1,
            ..CsvConfig::default()
        };
        let reg = Registry::default_registry();
        let e = analyze(&s, &t, &cfg, &reg, serde_json::Value::Null).unwrap_err();
        assert!(e.to_string().contains("missing column \"x\""), "{e}");
    }
}
