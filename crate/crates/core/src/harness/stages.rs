//! Stage bodies. Replicates run through [`crate::par`] on independent
//! substreams `substream_seed(base, stage_tag, replicate, law_tag)`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{CampaignConfig, PosteriorConfig};
use super::registry::{check_rule, CriterionResult, OracleContext, Registry};
use super::{Stage, StageReport};
use crate::certificates::{anytime_bound, bernoulli_kl_bound, kl_gaussian, sqrt_bound, PeelingSchedule};
use crate::constraints::{train, ConstraintMode, DualStatus, TailMode, TrainConfig};
use crate::diagnostics::{compensated_sum, diagnose, l2q_error_from_weights, KahanSum};
use crate::error::{Error, Result};
use crate::lab::{analytic_identities, sample, sigma_mc, target_risk, transport_variances, true_ratio_checked, true_ratios, Law, ShiftConfig};
use crate::par;
use crate::risk::{posterior_loss_terms, posterior_target_risk, weighted_empirical_risk, GaussianPosterior, LossKind, L_MAX};
use crate::rng::substream_seed;

// S1-S3 share one tag so the three modes see identical data per seed.
const TAG_IDENTITY: u64 = 0;
const TAG_FIT: u64 = 1;
const TAG_TAIL: u64 = 4;
const TAG_RISK: u64 = 5;
const TAG_COVERAGE: u64 = 6;
const TAG_ANYTIME: u64 = 7;

struct Builder<'a> {
    stage: Stage,
    registry: &'a Registry,
    criteria: Vec<CriterionResult>,
}

impl<'a> Builder<'a> {
    fn new(stage: Stage, registry: &'a Registry) -> Self {
        Self {
            stage,
            registry,
            criteria: Vec::new(),
        }
    }

    fn check(&mut self, id: &str, value: f64, ctx: OracleContext) -> Result<()> {
        let rule = self.registry.rule(self.stage, id)?;
        self.criteria.push(check_rule(value, rule, ctx)?);
        Ok(())
    }

    fn finish(self, config: Value, diagnostics: Value, annotations: &[(&str, f64)]) -> StageReport {
        StageReport {
            stage: self.stage,
            label: None,
            registry_hash: self.registry.hash.clone(),
            config,
            diagnostics,
            criteria: self.criteria,
            reference_annotations: annotations.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            artifact_hash: None,
        }
    }
}

pub(crate) fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Registry key suffix for a shift: `1.5` -> `1.5`, `2.0` -> `2`.
fn mu_key(mu: f64) -> String {
    format!("{mu}")
}

pub(super) fn run(stage: Stage, c: &CampaignConfig, reg: &Registry, prior: Option<&StageReport>, out: &Path) -> Result<StageReport> {
    match stage {
        Stage::S0 => s0(c, reg),
        Stage::S1 => fit_stage(Stage::S1, ConstraintMode::None, c, reg, None, out),
        Stage::S2 => fit_stage(Stage::S2, ConstraintMode::Norm, c, reg, prior, out),
        Stage::S3 => fit_stage(Stage::S3, ConstraintMode::NormMoments, c, reg, prior, out),
        Stage::S4 => s4(c, reg, prior, out),
        Stage::S5 => s5(c, reg),
        Stage::S6 => s6(c, reg),
        Stage::S7 => s7(c, reg),
        Stage::Csv => Err(Error::InvalidConfig("CSV runs go through run_csv_mode".into())),
    }
}

fn s0(c: &CampaignConfig, reg: &Registry) -> Result<StageReport> {
    let mut b = Builder::new(Stage::S0, reg);
    let ic = &c.identity;
    let mu = ic.mu;
    let shift = ShiftConfig::new(mu, ic.n, ic.n, substream_seed(c.base_seed, TAG_IDENTITY, 0, 0))?;
    let q = sample(&shift, Law::Source);
    let checked: Vec<_> = q.values.iter().map(|&z| true_ratio_checked(z, mu)).collect();
    let saturated = checked.iter().filter(|r| r.saturated).count();
    let w: Vec<f64> = checked.iter().map(|r| r.value).collect();
    let d = diagnose(&w)?;
    let n = q.len() as f64;
    let t1 = compensated_sum(w.iter().zip(&q.values).map(|(w, z)| w * z)) / n;
    let t2 = compensated_sum(w.iter().zip(&q.values).map(|(w, z)| w * z * z)) / n;
    let id = analytic_identities(mu);
    let tv = transport_variances(mu);

    b.check("normalization", d.mean, OracleContext::band(id.norm, 1.0 / n.sqrt()))?;
    b.check("second_moment", d.second_moment, OracleContext::value(id.second_moment))?;
    b.check("ess_fraction", d.ess_fraction, OracleContext::value(id.ess_fraction))?;
    b.check("transport_first", t1, OracleContext::band(id.first_moment_transport, (tv.first / n).sqrt()))?;
    b.check("transport_second", t2, OracleContext::band(id.second_moment_transport, (tv.second / n).sqrt()))?;

    let diagnostics = json!({
        "weights": d,
        "transport_first": t1,
        "transport_second": t2,
        "saturated": saturated,
        "identities": id,
    });
    Ok(b.finish(json!({ "base_seed": c.base_seed, "identity": c.identity }), diagnostics, &[]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FitRecord {
    seed_index: usize,
    seed: u64,
    status: String,
    steps_run: usize,
    final_g0: f64,
    final_g: Vec<f64>,
    l2q_holdout: f64,
    ess_fraction: f64,
    second_moment: f64,
    lambda: f64,
    mus: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FitSummary {
    median_abs_g0: f64,
    median_l2q: f64,
    failures: usize,
}

fn status_name(s: DualStatus) -> &'static str {
    match s {
        DualStatus::Ok => "ok",
        DualStatus::Diverged => "diverged",
    }
}

/// Train one configuration and evaluate the deployed ratio on an independent
/// source batch.
fn fit_one(tc: &TrainConfig, seed_index: usize, trace_path: Option<&Path>) -> FitRecord {
    let holdout = sample(&tc.shift.with_seed(tc.holdout_seed()), Law::Source);
    let failed = |status: String| FitRecord {
        seed_index,
        seed: tc.shift.seed,
        status,
        steps_run: 0,
        final_g0: f64::NAN,
        final_g: vec![],
        l2q_holdout: f64::NAN,
        ess_fraction: f64::NAN,
        second_moment: f64::NAN,
        lambda: f64::NAN,
        mus: vec![],
    };
    let out = match train(tc) {
        Ok(o) => o,
        Err(e) => return failed(format!("error: {e}")),
    };
    if let Some(p) = trace_path {
        if let Err(e) = out.trace.save_csv(p) {
            return failed(format!("error: {e}"));
        }
    }
    let w = out.deployed.evaluate(&holdout.values);
    let l2q = l2q_error_from_weights(&w, tc.shift.mu, &holdout.values).unwrap_or(f64::NAN);
    let d = diagnose(&w);
    let finite = w.iter().all(|x| x.is_finite());
    FitRecord {
        seed_index,
        seed: tc.shift.seed,
        status: if finite { status_name(out.status).into() } else { "error: non-finite ratio".into() },
        steps_run: out.trace.len(),
        final_g0: out.final_residuals.g0,
        final_g: out.final_residuals.g.clone(),
        l2q_holdout: l2q,
        ess_fraction: d.as_ref().map_or(f64::NAN, |d| d.ess_fraction),
        second_moment: d.as_ref().map_or(f64::NAN, |d| d.second_moment),
        lambda: out.duals.lambda,
        mus: out.duals.mus.clone(),
    }
}

fn summarize(records: &[FitRecord]) -> FitSummary {
    let ok: Vec<&FitRecord> = records.iter().filter(|r| r.status == "ok").collect();
    FitSummary {
        median_abs_g0: median(&ok.iter().map(|r| r.final_g0.abs()).collect::<Vec<_>>()),
        median_l2q: median(&ok.iter().map(|r| r.l2q_holdout).collect::<Vec<_>>()),
        failures: records.len() - ok.len(),
    }
}

fn prior_summary(prior: Option<&StageReport>, stage: Stage, snapshot: &Value) -> Result<FitSummary> {
    let p = prior.ok_or_else(|| Error::MissingPrerequisite(format!("{stage} needs its predecessor's artifact")))?;
    if p.config.get("fit") != snapshot.get("fit") || p.config.get("base_seed") != snapshot.get("base_seed") {
        return Err(Error::MissingPrerequisite(format!(
            "{} artifact was produced with a different fit configuration",
            p.stage
        )));
    }
    let s = p
        .diagnostics
        .get("summary")
        .cloned()
        .ok_or_else(|| Error::Schema(format!("{} artifact has no fit summary", p.stage)))?;
    Ok(serde_json::from_value(s)?)
}

fn fit_stage(stage: Stage, mode: ConstraintMode, c: &CampaignConfig, reg: &Registry, prior: Option<&StageReport>, out: &Path) -> Result<StageReport> {
    let f = &c.fit;
    let snapshot = json!({ "base_seed": c.base_seed, "fit": f, "mode": mode, "tail": TailMode::Raw });
    let before = match stage {
        Stage::S1 => None,
        _ => Some(prior_summary(prior, stage, &snapshot)?),
    };
    let records = par::map_range(f.seeds, |i| {
        let mut tc = TrainConfig::patch_test(f.mu, substream_seed(c.base_seed, TAG_FIT, i as u64, 0), mode);
        tc.shift.n_q = f.n;
        tc.shift.n_p = f.n;
        tc.steps = f.steps;
        tc.l2q_every = (f.l2q_every > 0).then_some(f.l2q_every);
        let trace = out.join(format!("{stage}_seed{i}_trace.csv"));
        fit_one(&tc, i, Some(&trace))
    });
    let summary = summarize(&records);

    let mut b = Builder::new(stage, reg);
    b.check("fit_failures", summary.failures as f64, OracleContext::none())?;
    let annotation = match stage {
        Stage::S1 => {
            let constant = (f.mu * f.mu).exp_m1().sqrt();
            b.check("l2q_beats_constant", summary.median_l2q / constant, OracleContext::none())?;
            ("published_l2q_none", 0.127)
        }
        Stage::S2 => {
            let s1 = before.as_ref().unwrap();
            b.check("norm_tightening", summary.median_abs_g0 / s1.median_abs_g0, OracleContext::none())?;
            b.check("l2q_norm_vs_none", summary.median_l2q / s1.median_l2q, OracleContext::none())?;
            ("published_l2q_norm", 0.094)
        }
        _ => {
            let s2 = before.as_ref().unwrap();
            b.check("l2q_moments_vs_norm", summary.median_l2q / s2.median_l2q, OracleContext::none())?;
            ("published_l2q_norm_moments", 0.080)
        }
    };
    let mut diagnostics = json!({ "seeds": records, "summary": summary });
    if let Some(p) = before {
        diagnostics["predecessor_summary"] = serde_json::to_value(p)?;
    }
    Ok(b.finish(snapshot, diagnostics, &[annotation]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TailRecord {
    mu: f64,
    clip: Option<f64>,
    fit: FitRecord,
}

fn s4(c: &CampaignConfig, reg: &Registry, prior: Option<&StageReport>, out: &Path) -> Result<StageReport> {
    let p = prior.ok_or_else(|| Error::MissingPrerequisite("S4 needs the S3 artifact".into()))?;
    let mode: ConstraintMode = serde_json::from_value(
        p.config
            .get("mode")
            .cloned()
            .ok_or_else(|| Error::Schema("S3 artifact has no constraint mode".into()))?,
    )?;
    let t = &c.tail;
    let mut jobs = Vec::new();
    for (k, (&mu, &clip)) in t.mus.iter().zip(&t.clips).enumerate() {
        for i in 0..t.seeds {
            for tail in [TailMode::Raw, TailMode::Clip { c: clip }] {
                jobs.push((k, mu, i, tail));
            }
        }
    }
    let records: Vec<TailRecord> = par::map(&jobs, |&(k, mu, i, tail)| {
        let mut tc = TrainConfig::patch_test(mu, substream_seed(c.base_seed, TAG_TAIL, i as u64, k as u64), mode);
        tc.shift.n_q = t.n;
        tc.shift.n_p = t.n;
        tc.steps = t.steps;
        tc.tail_mode = tail;
        let name = match tail {
            TailMode::Clip { .. } => "clip",
            _ => "raw",
        };
        let trace = out.join(format!("S4_mu{}_{name}_seed{i}_trace.csv", mu_key(mu)));
        TailRecord {
            mu,
            clip: tail.clip(),
            fit: fit_one(&tc, i, Some(&trace)),
        }
    });

    let mut b = Builder::new(Stage::S4, reg);
    let mut summaries = BTreeMap::new();
    for &mu in &t.mus {
        let ess_of = |clipped: bool| -> Vec<f64> {
            records
                .iter()
                .filter(|r| r.mu == mu && r.clip.is_some() == clipped && r.fit.ess_fraction.is_finite())
                .map(|r| r.fit.ess_fraction)
                .collect()
        };
        let (raw, clipped) = (ess_of(false), ess_of(true));
        let floor_ref = (-mu * mu).exp();
        let min_clipped = clipped.iter().copied().fold(f64::INFINITY, f64::min);
        let key = mu_key(mu);
        b.check(&format!("ess_clip_vs_raw_mu_{key}"), median(&clipped) / median(&raw), OracleContext::none())?;
        b.check(&format!("ess_floor_mu_{key}"), min_clipped / floor_ref, OracleContext::none())?;
        summaries.insert(
            key,
            json!({
                "median_ess_raw": median(&raw),
                "median_ess_clipped": median(&clipped),
                "min_ess_clipped": min_clipped,
                "ess_floor": 0.2 * floor_ref,
                "failures": records.iter().filter(|r| r.mu == mu && r.fit.status != "ok").count(),
            }),
        );
    }
    let snapshot = json!({ "base_seed": c.base_seed, "tail": t, "mode": mode });
    Ok(b.finish(snapshot, json!({ "runs": records, "summary": summaries }), &[]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RiskCell {
    mu: f64,
    seed_index: usize,
    a: f64,
    estimate: f64,
    oracle: f64,
    band: f64,
    pass: bool,
}

fn s5(c: &CampaignConfig, reg: &Registry) -> Result<StageReport> {
    let r = &c.risk;
    let mut ks = Vec::new();
    for &mu in &r.mus {
        ks.push(reg.param(Stage::S5, &format!("band_k_mu_{}", mu_key(mu)))?);
    }
    let jobs: Vec<(usize, usize)> = (0..r.mus.len()).flat_map(|m| (0..r.seeds).map(move |i| (m, i))).collect();
    let cells: Vec<Result<Vec<RiskCell>>> = par::map(&jobs, |&(m, i)| {
        let mu = r.mus[m];
        let shift = ShiftConfig::new(mu, r.n, r.n, substream_seed(c.base_seed, TAG_RISK, i as u64, m as u64))?;
        let q = sample(&shift, Law::Source);
        let w = true_ratios(&q.values, mu);
        r.predictors
            .iter()
            .map(|&a| {
                let estimate = weighted_empirical_risk(&w, a, &q.values, LossKind::Squared)?;
                let oracle = target_risk(a, mu);
                let band = ks[m] * sigma_mc(a, mu, r.n);
                Ok(RiskCell {
                    mu,
                    seed_index: i,
                    a,
                    estimate,
                    oracle,
                    band,
                    pass: (estimate - oracle).abs() <= band,
                })
            })
            .collect()
    });
    let cells: Vec<RiskCell> = cells.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    let failures = cells.iter().filter(|c| !c.pass).count();
    let mut b = Builder::new(Stage::S5, reg);
    b.check("risk_grid_failures", failures as f64, OracleContext::none())?;
    let by_mu: BTreeMap<String, usize> = r
        .mus
        .iter()
        .map(|&mu| (mu_key(mu), cells.iter().filter(|c| c.mu == mu && !c.pass).count()))
        .collect();
    let diagnostics = json!({ "cells": cells, "failures": failures, "failures_by_mu": by_mu, "band_k": ks });
    Ok(b.finish(json!({ "base_seed": c.base_seed, "risk": r }), diagnostics, &[("published_grid_failures", 0.0)]))
}

fn posteriors(p: &PosteriorConfig) -> Result<(GaussianPosterior, GaussianPosterior, f64)> {
    let post = GaussianPosterior::new(p.a0, p.sigma2)?;
    let prior = GaussianPosterior::new(p.prior_a0, p.prior_sigma2)?;
    Ok((post, prior, kl_gaussian(&post, &prior)))
}

/// Prefix sums of the per-sample posterior loss terms at the requested `ts`.
fn prefix_risks(terms: &[f64], ts: &[usize]) -> Vec<f64> {
    let mut acc = KahanSum::default();
    let mut out = Vec::with_capacity(ts.len());
    let mut next = 0;
    for (i, &x) in terms.iter().enumerate() {
        acc.add(x);
        while next < ts.len() && ts[next] == i + 1 {
            out.push(acc.value() / (i + 1) as f64);
            next += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CoverageRecord {
    replicate: usize,
    emp_risk: Vec<f64>,
    sqrt: Vec<f64>,
    bernoulli_kl: Vec<f64>,
}

fn s6(c: &CampaignConfig, reg: &Registry) -> Result<StageReport> {
    let cc = &c.coverage;
    let (post, _, kl) = posteriors(&cc.posterior)?;
    let risk = posterior_target_risk(&post, cc.mu, L_MAX);
    let mut ts: Vec<usize> = cc.rate_ts.clone();
    ts.push(cc.t);
    ts.sort_unstable();
    ts.dedup();
    let at_t = ts.iter().position(|&t| t == cc.t).unwrap();

    let records: Vec<Result<CoverageRecord>> = par::map_range(cc.replicates, |j| {
        let shift = ShiftConfig::new(cc.mu, cc.t, cc.t, substream_seed(c.base_seed, TAG_COVERAGE, j as u64, 0))?;
        let q = sample(&shift, Law::Source);
        let w = true_ratios(&q.values, cc.mu);
        let terms = posterior_loss_terms(&post, &w, &q.values, L_MAX)?;
        let emp = prefix_risks(&terms, &ts);
        let sqrt = ts.iter().zip(&emp).map(|(&t, &e)| sqrt_bound(e, kl, t as u64, cc.delta)).collect();
        let bkl = ts.iter().zip(&emp).map(|(&t, &e)| bernoulli_kl_bound(e, kl, t as u64, cc.delta)).collect();
        Ok(CoverageRecord {
            replicate: j,
            emp_risk: emp,
            sqrt,
            bernoulli_kl: bkl,
        })
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let n = records.len() as f64;
    let cov_sqrt = records.iter().filter(|r| risk <= r.sqrt[at_t]).count() as f64 / n;
    let cov_kl = records.iter().filter(|r| risk <= r.bernoulli_kl[at_t]).count() as f64 / n;
    let looser = records.iter().filter(|r| r.bernoulli_kl[at_t] > r.sqrt[at_t]).count();
    let med_kl: Vec<f64> = (0..ts.len()).map(|k| median(&records.iter().map(|r| r.bernoulli_kl[k]).collect::<Vec<_>>())).collect();
    let med_sqrt: Vec<f64> = (0..ts.len()).map(|k| median(&records.iter().map(|r| r.sqrt[k]).collect::<Vec<_>>())).collect();
    let scaled = |med: &[f64]| -> Vec<f64> {
        ts.iter()
            .zip(med)
            .filter(|(t, _)| cc.rate_ts.contains(t))
            .map(|(&t, &m)| {
                let t = t as f64;
                (m - risk) * (t / t.ln()).sqrt()
            })
            .collect()
    };
    let spread = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) / v.iter().copied().fold(f64::INFINITY, f64::min);
    let (rate_sqrt, rate_kl) = (scaled(&med_sqrt), scaled(&med_kl));

    let mut b = Builder::new(Stage::S6, reg);
    b.check("coverage_sqrt", cov_sqrt, OracleContext::none())?;
    b.check("coverage_bernoulli_kl", cov_kl, OracleContext::none())?;
    b.check("bernoulli_tighter", looser as f64, OracleContext::none())?;
    b.check("non_vacuity", med_kl[at_t] / risk, OracleContext::none())?;
    b.check("rate_stability", spread(&rate_sqrt), OracleContext::none())?;
    let diagnostics = json!({
        "target_risk": risk,
        "kl": kl,
        "ts": ts,
        "median_sqrt": med_sqrt,
        "median_bernoulli_kl": med_kl,
        "rate_scaled_sqrt": rate_sqrt,
        "rate_scaled_bernoulli_kl": rate_kl,
        "rate_spread_bernoulli_kl": spread(&rate_kl),
        "replicates": records,
    });
    Ok(b.finish(json!({ "base_seed": c.base_seed, "coverage": cc }), diagnostics, &[]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnytimeRecord {
    replicate: usize,
    first_violation_kl: Option<u64>,
    first_violation_sqrt: Option<u64>,
    kl_at_t_min: f64,
    kl_at_t_max: f64,
    sqrt_at_t_min: f64,
    sqrt_at_t_max: f64,
}

fn s7(c: &CampaignConfig, reg: &Registry) -> Result<StageReport> {
    let ac = &c.anytime;
    let (post, _, kl) = posteriors(&ac.posterior)?;
    let risk = posterior_target_risk(&post, ac.mu, L_MAX);
    let schedule = PeelingSchedule::new(ac.t_min, ac.b, ac.delta)?;
    let mut ts: Vec<u64> = (ac.t_min..=ac.t_max).step_by(ac.stride as usize).collect();
    if *ts.last().unwrap() != ac.t_max {
        ts.push(ac.t_max);
    }
    let tsz: Vec<usize> = ts.iter().map(|&t| t as usize).collect();

    let records: Vec<Result<AnytimeRecord>> = par::map_range(ac.replicates, |j| {
        let n = ac.t_max as usize;
        let shift = ShiftConfig::new(ac.mu, n, n, substream_seed(c.base_seed, TAG_ANYTIME, j as u64, 0))?;
        let q = sample(&shift, Law::Source);
        let w = true_ratios(&q.values, ac.mu);
        let terms = posterior_loss_terms(&post, &w, &q.values, L_MAX)?;
        let emp = prefix_risks(&terms, &tsz);
        let mut rec = AnytimeRecord {
            replicate: j,
            first_violation_kl: None,
            first_violation_sqrt: None,
            kl_at_t_min: f64::NAN,
            kl_at_t_max: f64::NAN,
            sqrt_at_t_min: f64::NAN,
            sqrt_at_t_max: f64::NAN,
        };
        for (&t, &e) in ts.iter().zip(&emp) {
            let bk = anytime_bound(e, kl, t, &schedule, true)?.bound;
            let bs = anytime_bound(e, kl, t, &schedule, false)?.bound;
            if risk > bk && rec.first_violation_kl.is_none() {
                rec.first_violation_kl = Some(t);
            }
            if risk > bs && rec.first_violation_sqrt.is_none() {
                rec.first_violation_sqrt = Some(t);
            }
            if t == ac.t_min {
                rec.kl_at_t_min = bk;
                rec.sqrt_at_t_min = bs;
            }
            if t == ac.t_max {
                rec.kl_at_t_max = bk;
                rec.sqrt_at_t_max = bs;
            }
        }
        Ok(rec)
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let n = records.len() as f64;
    let fail_kl = records.iter().filter(|r| r.first_violation_kl.is_some()).count() as f64 / n;
    let fail_sqrt = records.iter().filter(|r| r.first_violation_sqrt.is_some()).count() as f64 / n;
    let med = |f: fn(&AnytimeRecord) -> f64| median(&records.iter().map(f).collect::<Vec<_>>());
    let (kl_min, kl_max) = (med(|r| r.kl_at_t_min), med(|r| r.kl_at_t_max));

    let mut b = Builder::new(Stage::S7, reg);
    b.check("anytime_failure_rate", fail_kl, OracleContext::none())?;
    b.check("anytime_band_t100", kl_min, OracleContext::none())?;
    b.check("anytime_band_t1000", kl_max, OracleContext::none())?;
    let diagnostics = json!({
        "target_risk": risk,
        "kl": kl,
        "checked_ts": ts.len(),
        "failure_rate_bernoulli_kl": fail_kl,
        "failure_rate_sqrt": fail_sqrt,
        "median_bernoulli_kl_at_t_min": kl_min,
        "median_bernoulli_kl_at_t_max": kl_max,
        "median_sqrt_at_t_min": med(|r| r.sqrt_at_t_min),
        "median_sqrt_at_t_max": med(|r| r.sqrt_at_t_max),
        "replicates": records,
    });
    let annotations = [("published_band_t100_low", 0.08), ("published_band_t100_high", 0.12), ("published_band_t1000_low", 0.03), ("published_band_t1000_high", 0.05)];
    Ok(b.finish(json!({ "base_seed": c.base_seed, "anytime": ac }), diagnostics, &annotations))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_prefixes() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        let p = prefix_risks(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 4]);
        assert_eq!(p, vec![1.0, 1.5, 2.5]);
        assert_eq!(mu_key(2.0), "2");
        assert_eq!(mu_key(1.5), "1.5");
    }
}
