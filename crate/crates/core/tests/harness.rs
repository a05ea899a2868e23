use std::fs;
use std::path::Path;

use covshift::constraints::train_on;
use covshift::diagnostics::diagnose;
use covshift::harness::csv_mode::{test_functions, Table};
use covshift::harness::{self, report, run_csv_mode, CampaignConfig, CsvConfig, Registry, Stage};
use covshift::lab::{sample, Law, ShiftConfig};
use covshift::net::column;
use covshift::Error;

const SMALL: &str = r#"
base_seed = 7
[fit]
n = 400
steps = 40
seeds = 2
l2q_every = 10
[tail]
n = 400
steps = 40
seeds = 2
[risk]
n = 2000
seeds = 2
[coverage]
replicates = 16
t = 2000
rate_ts = [100, 1000, 2000]
[anytime]
replicates = 8
t_max = 400
"#;

fn small() -> CampaignConfig {
    CampaignConfig::parse(SMALL).unwrap()
}

#[test]
fn sweep_is_complete_and_byte_deterministic() {
    let cfg = small();
    let reg = Registry::default_registry();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = harness::sweep(&Stage::ALL, &cfg, &reg, a.path()).unwrap();
    harness::sweep(&Stage::ALL, &cfg, &reg, b.path()).unwrap();
    assert_eq!(ra.len(), 8);
    for (r, s) in ra.iter().zip(Stage::ALL) {
        r.validate(&reg).unwrap();
        let name = format!("{s}.json");
        let x = fs::read(a.path().join(&name)).unwrap();
        let y = fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }
    assert!(a.path().join("S1_seed0_trace.csv").exists());
    let head = fs::read_to_string(a.path().join("S3_seed1_trace.csv")).unwrap();
    assert!(head.starts_with("step,lsif,g0,g1,g2,lambda,mu1,mu2,l2q_optional"));

    // rerunning a stage into the same directory is a no-op
    harness::run_stage(Stage::S0, &cfg, &reg, a.path()).unwrap();

    let table = report::render_text(&report::collect(a.path()).unwrap());
    for s in Stage::ALL {
        for id in reg.registered_ids(s) {
            assert!(table.contains(&id), "{id} missing from report");
        }
    }
    let csv = report::render_csv(&report::collect(a.path()).unwrap()).unwrap();
    let total: usize = Stage::ALL.iter().map(|s| reg.registered_ids(*s).len()).sum();
    assert_eq!(csv.lines().count(), total + 1);
}

#[test]
fn stage_refuses_to_run_without_its_predecessor() {
    let dir = tempfile::tempdir().unwrap();
    let e = harness::run_stage(Stage::S3, &small(), &Registry::default_registry(), dir.path()).unwrap_err();
    assert!(matches!(e, Error::MissingPrerequisite(_)), "{e}");
}

#[test]
fn changed_config_conflicts_with_existing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::default_registry();
    let mut cfg = small();
    harness::run_stage(Stage::S5, &cfg, &reg, dir.path()).unwrap();
    cfg.risk.seeds = 3;
    let e = harness::run_stage(Stage::S5, &cfg, &reg, dir.path()).unwrap_err();
    assert!(matches!(e, Error::ArtifactConflict { .. }), "{e}");
}

#[test]
fn predecessor_from_a_different_fit_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::default_registry();
    let mut cfg = small();
    harness::run_stage(Stage::S1, &cfg, &reg, dir.path()).unwrap();
    cfg.fit.steps += 1;
    let e = harness::run_stage(Stage::S2, &cfg, &reg, dir.path()).unwrap_err();
    assert!(matches!(e, Error::MissingPrerequisite(_)), "{e}");
}

#[test]
fn custom_registry_hash_is_embedded() {
    let dir = tempfile::tempdir().unwrap();
    let text = harness::registry::DEFAULT_REGISTRY.replace("param = 0.10", "param = 0.11");
    fs::write(dir.path().join("reg.toml"), &text).unwrap();
    fs::write(dir.path().join("c.toml"), format!("registry = \"reg.toml\"\n{SMALL}")).unwrap();
    let cfg = CampaignConfig::load(&dir.path().join("c.toml")).unwrap();
    let reg = harness::load_registry(&cfg).unwrap();
    assert_ne!(reg.hash, Registry::default_registry().hash);
    let r = harness::run_stage(Stage::S0, &cfg, &reg, &dir.path().join("out")).unwrap();
    assert_eq!(r.registry_hash, reg.hash);
}

fn write_column(path: &Path, name: &str, xs: &[f64]) {
    let mut s = format!("{name}\n");
    for x in xs {
        s.push_str(&format!("{x}\n"));
    }
    fs::write(path, s).unwrap();
}

fn csv_config() -> CsvConfig {
    CsvConfig {
        steps: 60,
        ..CsvConfig::default()
    }
}

#[test]
fn csv_mode_matches_in_memory_run_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let shift = ShiftConfig::new(0.5, 600, 500, 11).unwrap();
    let q = sample(&shift, Law::Source).values;
    let p = sample(&shift, Law::Target).values;
    write_column(&dir.path().join("q.csv"), "z", &q);
    write_column(&dir.path().join("p.csv"), "z", &p);

    let cfg = csv_config();
    let reg = Registry::default_registry();
    let (report, path) = run_csv_mode(&dir.path().join("q.csv"), &dir.path().join("p.csv"), &cfg, &reg, dir.path()).unwrap();
    assert!(path.exists());
    assert_eq!(report.label.as_deref(), Some("NO-ORACLE"));
    assert!(report.criteria.is_empty());

    let tc = cfg.train_config(q.len(), p.len()).unwrap();
    let out = train_on(&tc, column(&q).view(), column(&p).view(), test_functions(1), None).unwrap();
    let d = diagnose(&out.deployed.evaluate(&q)).unwrap();
    assert_eq!(report.diagnostics["weights"], serde_json::to_value(d).unwrap());
}

#[test]
fn csv_self_shift_mean_within_clt_band() {
    let dir = tempfile::tempdir().unwrap();
    let shift = ShiftConfig::new(0.0, 2000, 2000, 3).unwrap();
    let q = sample(&shift, Law::Source).values;
    let loss: Vec<f64> = q.iter().map(|z| (z * z / 16.0).min(1.0)).collect();
    let mut text = String::from("z,loss\n");
    for (z, l) in q.iter().zip(&loss) {
        text.push_str(&format!("{z},{l}\n"));
    }
    text.push_str("NaN,0.5\n");
    let f = dir.path().join("same.csv");
    fs::write(&f, text).unwrap();

    // full default training length: the null check is about the fitted ratio
    let cfg = CsvConfig {
        loss_column: Some("loss".into()),
        ..CsvConfig::default()
    };
    let (report, _) = run_csv_mode(&f, &f, &cfg, &Registry::default_registry(), dir.path()).unwrap();
    let d = &report.diagnostics;
    assert_eq!(d["rejected_rows"]["source"], 1);
    let mean = d["weights"]["mean"].as_f64().unwrap();
    // sampling-noise floor of the normalization, as in the S0 check
    let band = 4.0 / 2000f64.sqrt();
    assert!((mean - 1.0).abs() <= band, "mean {mean}, band {band}");
    let c = &d["certificates"];
    let emp = c["weighted_emp_risk"].as_f64().unwrap();
    assert!(c["bernoulli_kl"]["bound"].as_f64().unwrap() >= emp.min(1.0));
    assert!(c["anytime_bernoulli_kl"]["bound"].as_f64().unwrap() >= c["bernoulli_kl"]["bound"].as_f64().unwrap());
}

#[test]
fn csv_missing_feature_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_column(&dir.path().join("q.csv"), "x", &[0.1, 0.2]);
    write_column(&dir.path().join("p.csv"), "y", &[0.1, 0.2]);
    let e = run_csv_mode(&dir.path().join("q.csv"), &dir.path().join("p.csv"), &csv_config(), &Registry::default_registry(), dir.path()).unwrap_err();
    assert!(matches!(e, Error::Schema(ref m) if m.contains("\"x\"")), "{e}");
    assert!(Table::read(&dir.path().join("nope.csv")).is_err());
}
