//! Consolidated CSV tables and the JSON summary with bootstrap intervals.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use selrob_core::rng::Rng;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::sweep::{AdversarialCell, CellResult, Failure};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile(&v, 0.5))
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, confidence: f64, rng: &mut Rng) -> Result<Interval> {
    if values.is_empty() || resamples == 0 {
        return Err(HarnessError::Config("bootstrap needs values and resamples".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..resamples).map(|_| (0..n).map(|_| values[rng.below(n)]).sum::<f64>() / n as f64).collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    Ok(Interval { mean, low: quantile(&means, tail), high: quantile(&means, 1.0 - tail) })
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Named scalar measurements of one cell, the rows summarized by bootstrap.
pub fn cell_scalars(cell: &CellResult) -> Vec<(String, f64)> {
    let m = &cell.metrics;
    let mut out = vec![
        ("best_epoch".to_string(), cell.record.best_epoch as f64),
        ("best_val_accuracy".into(), cell.record.best_val_accuracy()),
        ("clean_accuracy".into(), m.clean_accuracy),
    ];
    if let Some(s) = &m.selectivity {
        out.push(("si_network".into(), s.network_mean));
        if let Some(v) = s.network_mean_live {
            out.push(("si_network_live".into(), v));
        }
        for (tap, v) in s.taps.iter().zip(&s.layer_mean) {
            out.push((format!("si_{tap}"), *v));
        }
    }
    if let Some(c) = &m.corruption {
        out.push(("corruption_grand_mean".into(), c.grand_mean));
        if let Ok(v) = c.normalized_accuracy() {
            out.push(("corruption_normalized".into(), v));
        }
        for (k, kind) in c.kinds.iter().enumerate() {
            out.push((format!("corruption_{}", kind.name()), c.kind_mean(k)));
        }
    }
    for p in m.fgsm.iter().flatten() {
        out.push((format!("fgsm_eps{}", p.epsilon), p.accuracy));
    }
    if let Some(p) = &m.pgd {
        for (s, a) in &p.points {
            out.push((format!("pgd_steps{s}"), *a));
        }
    }
    if let Some(j) = m.jacobian_frobenius {
        out.push(("jacobian_frobenius".into(), j));
    }
    for t in m.gradient_cv.iter().flatten() {
        if let Some(r) = &t.report {
            if let Some(v) = r.mean_cv_u() {
                out.push((format!("cv_u_{}", t.tap), v));
            }
            if let Some(v) = r.cv_l {
                out.push((format!("cv_l_{}", t.tap), v));
            }
        }
    }
    for d in m.dimensionality.iter().flatten() {
        for (l, tap) in d.taps.iter().enumerate() {
            for (t, thr) in d.thresholds.iter().enumerate() {
                out.push((format!("dim_{}_{tap}_pca{thr}", d.mode.name()), d.fractions[l][t]));
            }
            if let Some(v) = d.twonn_fraction[l] {
                out.push((format!("dim_{}_{tap}_twonn", d.mode.name()), v));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub metric: String,
    pub alpha: f64,
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a> {
    cells: usize,
    alphas: &'a [f64],
    seeds: &'a [u64],
    pgd_step_rule: String,
    pgd_step_size: f64,
    bootstrap_resamples: usize,
    confidence: f64,
    metrics: Vec<MetricSummary>,
    adversarial_training: Vec<MetricSummary>,
    failures: &'a [Failure],
}

#[derive(Debug, Clone, Default)]
pub struct ReportFiles {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

struct TableWriter {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl TableWriter {
    fn write(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let path = self.dir.join(name);
        let unwritable = |e: csv::Error, path: &Path| match e.into_kind() {
            csv::ErrorKind::Io(source) => HarnessError::Unwritable { path: path.to_path_buf(), source },
            other => HarnessError::Config(format!("{}: {other:?}", path.display())),
        };
        let mut w = csv::Writer::from_path(&path).map_err(|e| unwritable(e, &path))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        self.files.push(path);
        Ok(())
    }
}

fn summarize(groups: BTreeMap<(String, i64), (f64, Vec<f64>)>, cfg: &ExperimentConfig) -> Result<Vec<MetricSummary>> {
    let r = &cfg.report;
    let mut out = Vec::new();
    for ((metric, _), (key, values)) in groups {
        // Seed per group so one group's interval does not depend on the others.
        let mut h = 0u64;
        for b in metric.bytes() {
            h = h.wrapping_mul(131).wrapping_add(b as u64);
        }
        let mut rng = Rng::derive(r.bootstrap_seed, &[h, key.to_bits()]);
        let ci = bootstrap_ci(&values, r.bootstrap_resamples, r.confidence, &mut rng)?;
        out.push(MetricSummary { metric, alpha: key, n: values.len(), median: median(&values).expect("non-empty"), mean: ci.mean, ci_low: ci.low, ci_high: ci.high });
    }
    Ok(out)
}

/// Order-preserving group key for an `f64`.
fn order_key(v: f64) -> i64 {
    let b = v.to_bits() as i64;
    if b < 0 {
        b ^ i64::MAX
    } else {
        b
    }
}

/// Writes every consolidated table and `summary.json` into `dir`.
pub fn emit_report(cells: &[CellResult], adversarial: &[AdversarialCell], failures: &[Failure], cfg: &ExperimentConfig, dir: &Path) -> Result<ReportFiles> {
    if cells.is_empty() && adversarial.is_empty() {
        return Err(HarnessError::Config("no completed runs to report".into()));
    }
    fs::create_dir_all(dir).map_err(|source| HarnessError::Unwritable { path: dir.to_path_buf(), source })?;
    let mut tw = TableWriter { dir: dir.to_path_buf(), files: Vec::new() };
    let key = |c: &CellResult| vec![fmt(c.alpha), c.seed.to_string()];

    let mut rows = Vec::new();
    for c in cells {
        for h in &c.record.history {
            let mut r = key(c);
            r.extend([h.epoch.to_string(), fmt(h.learning_rate), fmt(h.train_loss), fmt(h.train_cross_entropy), fmt(h.minibatch_si), h.clipped_batches.to_string(), fmt(h.val_accuracy), ((h.epoch == c.record.best_epoch) as u8).to_string()]);
            rows.push(r);
        }
    }
    tw.write("training.csv", &["alpha", "seed", "epoch", "learning_rate", "train_loss", "train_cross_entropy", "minibatch_si", "clipped_batches", "val_accuracy", "selected"], rows)?;

    let mut rows = Vec::new();
    for c in cells {
        if let Some(s) = &c.metrics.selectivity {
            for (l, tap) in s.taps.iter().enumerate() {
                let mut r = key(c);
                r.extend([tap.clone(), fmt(s.layer_mean[l]), opt(s.layer_mean_live[l]), fmt(s.dead_proportion[l])]);
                rows.push(r);
            }
            let mut r = key(c);
            let dead = s.dead_mask.iter().flatten().filter(|&&d| d).count() as f64 / s.dead_mask.iter().map(Vec::len).sum::<usize>() as f64;
            r.extend(["network".into(), fmt(s.network_mean), opt(s.network_mean_live), fmt(dead)]);
            rows.push(r);
        }
    }
    tw.write("selectivity.csv", &["alpha", "seed", "layer", "si_mean", "si_mean_live", "dead_proportion"], rows)?;

    let mut rows = Vec::new();
    for c in cells {
        if let Some(s) = &c.metrics.corruption {
            let mut r = key(c);
            r.extend(["clean".into(), "0".into(), fmt(s.clean_accuracy)]);
            rows.push(r);
            for (k, kind) in s.kinds.iter().enumerate() {
                for (sev, a) in s.accuracy[k].iter().enumerate() {
                    let mut r = key(c);
                    r.extend([kind.name().into(), (sev + 1).to_string(), fmt(*a)]);
                    rows.push(r);
                }
            }
        }
    }
    tw.write("corruption.csv", &["alpha", "seed", "kind", "severity", "accuracy"], rows)?;

    let mut rows = Vec::new();
    for c in cells {
        for p in c.metrics.fgsm.iter().flatten() {
            let mut r = key(c);
            r.extend([fmt(p.epsilon), fmt(p.accuracy)]);
            rows.push(r);
        }
    }
    tw.write("fgsm.csv", &["alpha", "seed", "epsilon_255", "accuracy"], rows)?;

    let mut rows = Vec::new();
    for c in cells {
        if let Some(p) = &c.metrics.pgd {
            for (s, a) in &p.points {
                let mut r = key(c);
                r.extend([fmt(p.epsilon), fmt(p.step_size), p.step_rule.clone(), s.to_string(), fmt(*a)]);
                rows.push(r);
            }
        }
    }
    tw.write("pgd.csv", &["alpha", "seed", "epsilon_255", "step_size", "step_rule", "steps", "accuracy"], rows)?;

    let mut rows = Vec::new();
    for c in cells {
        if let Some(j) = c.metrics.jacobian_frobenius {
            let mut r = key(c);
            r.extend(["frobenius".into(), fmt(j)]);
            rows.push(r);
        }
    }
    tw.write("jacobian.csv", &["alpha", "seed", "norm", "mean"], rows)?;

    let mut rows = Vec::new();
    for c in cells {
        for t in c.metrics.gradient_cv.iter().flatten() {
            let mut r = key(c);
            match &t.report {
                Some(g) => r.extend([t.tap.clone(), opt(g.mean_cv_u()), fmt(g.mu_l), fmt(g.sigma_l), opt(g.cv_l)]),
                None => r.extend([t.tap.clone(), String::new(), "0".into(), "0".into(), String::new()]),
            }
            rows.push(r);
        }
    }
    tw.write("gradient_cv.csv", &["alpha", "seed", "layer", "mean_cv_u", "mu_l", "sigma_l", "cv_l"], rows)?;

    let mut rows = Vec::new();
    for c in cells {
        for d in c.metrics.dimensionality.iter().flatten() {
            for (l, tap) in d.taps.iter().enumerate() {
                for (t, thr) in d.thresholds.iter().enumerate() {
                    let mut r = key(c);
                    r.extend([tap.clone(), d.mode.name().into(), format!("pca{thr}"), fmt(d.counts[l][t]), fmt(d.fractions[l][t])]);
                    rows.push(r);
                }
                let mut r = key(c);
                r.extend([tap.clone(), d.mode.name().into(), "twonn".into(), opt(d.twonn[l]), opt(d.twonn_fraction[l])]);
                rows.push(r);
            }
        }
    }
    tw.write("dimensionality.csv", &["alpha", "seed", "layer", "mode", "threshold_or_method", "value", "fraction"], rows)?;

    let mut rows = Vec::new();
    for a in adversarial {
        let s = &a.selectivity;
        rows.push(vec![a.iterations.to_string(), a.seed.to_string(), fmt(a.clean_accuracy), fmt(s.network_mean), opt(s.network_mean_live)]);
    }
    if !adversarial.is_empty() {
        tw.write("adversarial_selectivity.csv", &["pgd_iterations", "seed", "clean_accuracy", "si_network", "si_network_live"], rows)?;
    }

    let rows = failures
        .iter()
        .map(|f| vec![opt(f.alpha), f.seed.to_string(), f.iterations.map(|i| i.to_string()).unwrap_or_default(), f.stage.clone(), f.message.clone()])
        .collect();
    tw.write("failures.csv", &["alpha", "seed", "pgd_iterations", "stage", "message"], rows)?;

    let mut scalar_rows = Vec::new();
    let mut groups: BTreeMap<(String, i64), (f64, Vec<f64>)> = BTreeMap::new();
    for c in cells {
        for (name, v) in cell_scalars(c) {
            let mut r = key(c);
            r.extend([name.clone(), fmt(v)]);
            scalar_rows.push(r);
            groups.entry((name, order_key(c.alpha))).or_insert((c.alpha, Vec::new())).1.push(v);
        }
    }
    tw.write("scalars.csv", &["alpha", "seed", "metric", "value"], scalar_rows)?;
    let mut adv_groups: BTreeMap<(String, i64), (f64, Vec<f64>)> = BTreeMap::new();
    for a in adversarial {
        let k = a.iterations as f64;
        adv_groups.entry(("si_network".into(), order_key(k))).or_insert((k, Vec::new())).1.push(a.selectivity.network_mean);
        if let Some(v) = a.selectivity.network_mean_live {
            adv_groups.entry(("si_network_live".into(), order_key(k))).or_insert((k, Vec::new())).1.push(v);
        }
    }

    let pgd = cfg.attacks.pgd_config(1);
    let summary = Summary {
        cells: cells.len(),
        alphas: &cfg.alphas,
        seeds: &cfg.seeds,
        pgd_step_rule: cfg.attacks.pgd_step.name(),
        pgd_step_size: pgd.step_size,
        bootstrap_resamples: cfg.report.bootstrap_resamples,
        confidence: cfg.report.confidence,
        metrics: summarize(groups, cfg)?,
        adversarial_training: summarize(adv_groups, cfg)?,
        failures,
    };
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|source| HarnessError::Unwritable { path: path.clone(), source })?;
    tw.files.push(path);
    Ok(ReportFiles { dir: dir.to_path_buf(), files: tw.files })
}
