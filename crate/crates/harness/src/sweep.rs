//! The α sweep and the PGD-training sweep.

use std::path::PathBuf;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use selrob_core::selectivity::SelectivityReport;

use crate::config::{eval_hash, train_hash, ExperimentConfig};
use crate::data::Splits;
use crate::error::Result;
use crate::evaluate::{self, evaluate, metrics_file, CellMetrics};
use crate::report::{emit_report, ReportFiles};
use crate::run::{load_splits, read_json, run_dir, train_run, write_json_atomic, RunRecord, TrainedRun, RECORD_FILE};

const ADVERSARIAL_FILE: &str = "adversarial-selectivity.json";

#[derive(Debug, Clone)]
pub struct CellResult {
    pub alpha: f64,
    pub seed: u64,
    pub record: RunRecord,
    pub metrics: CellMetrics,
    pub dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct AdversarialCell {
    pub iterations: usize,
    pub seed: u64,
    pub record: RunRecord,
    pub clean_accuracy: f64,
    pub selectivity: SelectivityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub alpha: Option<f64>,
    pub seed: u64,
    pub iterations: Option<usize>,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<CellResult>,
    pub adversarial: Vec<AdversarialCell>,
    pub failures: Vec<Failure>,
    pub report: ReportFiles,
}

impl SweepOutcome {
    pub fn cells_for(&self, alpha: f64) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(move |c| c.alpha == alpha)
    }
}

/// Evaluates a trained run, reusing stored metrics for the same evaluation
/// settings.
pub fn evaluate_run(cfg: &ExperimentConfig, splits: &Splits, run: &TrainedRun) -> Result<CellMetrics> {
    let path = metrics_file(&run.dir, &eval_hash(cfg));
    if run.cached {
        if let Some(m) = read_json::<CellMetrics>(&path) {
            return Ok(m);
        }
    }
    let metrics = evaluate(cfg, &run.network, &splits.test.set, run.record.alpha)?;
    write_json_atomic(&path, &metrics)?;
    Ok(metrics)
}

/// Trains and evaluates one α cell.
pub fn run_cell(cfg: &ExperimentConfig, splits: &Splits, alpha: f64, seed: u64) -> std::result::Result<CellResult, Failure> {
    let fail = |stage: &str, e: crate::error::HarnessError| Failure { alpha: Some(alpha), seed, iterations: None, stage: stage.into(), message: e.to_string() };
    let run = train_run(cfg, splits, alpha, seed, None).map_err(|e| fail("train", e))?;
    let metrics = evaluate_run(cfg, splits, &run).map_err(|e| fail("evaluate", e))?;
    Ok(CellResult { alpha, seed, record: run.record, metrics, dir: run.dir })
}

fn run_adversarial(cfg: &ExperimentConfig, splits: &Splits, iterations: usize, seed: u64) -> std::result::Result<AdversarialCell, Failure> {
    let fail = |stage: &str, e: crate::error::HarnessError| Failure { alpha: Some(0.0), seed, iterations: Some(iterations), stage: stage.into(), message: e.to_string() };
    let attack = cfg.adversarial_training.attack(iterations);
    let run = train_run(cfg, splits, 0.0, seed, attack).map_err(|e| fail("train", e))?;
    let test = &splits.test.set;
    let selectivity = evaluate::selectivity(cfg, &run.network, test, 0.0).map_err(|e| fail("selectivity", e))?;
    let clean_accuracy = run.network.accuracy(&test.x, &test.y).map_err(|e| fail("accuracy", e.into()))?;
    write_json_atomic(&run.dir.join(ADVERSARIAL_FILE), &(clean_accuracy, &selectivity)).map_err(|e| fail("persist", e))?;
    Ok(AdversarialCell { iterations, seed, record: run.record, clean_accuracy, selectivity })
}

/// Runs every `(alpha, seed)` cell and every PGD-training cell, then writes
/// the consolidated report under `<output>/report`.
///
/// A cell that fails is recorded and skipped; the sweep itself only fails
/// when the data cannot be loaded or the report cannot be written.
pub fn run_alpha_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for &alpha in &cfg.alphas {
        for &seed in &cfg.seeds {
            match run_cell(cfg, &splits, alpha, seed) {
                Ok(c) => {
                    info!("alpha {alpha} seed {seed}: best epoch {} val {:.4} test {:.4}", c.record.best_epoch, c.record.best_val_accuracy(), c.metrics.clean_accuracy);
                    failures.extend(c.metrics.failures.iter().map(|f| Failure { alpha: Some(alpha), seed, iterations: None, stage: f.stage.clone(), message: f.message.clone() }));
                    cells.push(c);
                }
                Err(f) => {
                    warn!("alpha {alpha} seed {seed}: {} failed: {}", f.stage, f.message);
                    failures.push(f);
                }
            }
        }
    }
    let mut adversarial = Vec::new();
    for &seed in &cfg.adversarial_training.seeds {
        for &iterations in &cfg.adversarial_training.iterations {
            match run_adversarial(cfg, &splits, iterations, seed) {
                Ok(a) => {
                    info!("pgd-train {iterations} seed {seed}: si {:.4}", a.selectivity.network_mean);
                    adversarial.push(a);
                }
                Err(f) => {
                    warn!("pgd-train {iterations} seed {seed}: {} failed: {}", f.stage, f.message);
                    failures.push(f);
                }
            }
        }
    }
    let report = emit_report(&cells, &adversarial, &failures, cfg, &cfg.resolved_output_dir().join("report"))?;
    Ok(SweepOutcome { cells, adversarial, failures, report })
}

/// Reassembles sweep results from stored records and metrics without
/// training; cells with nothing on disk are reported as failures.
pub fn collect_cached(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    let eval = eval_hash(cfg);
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for &alpha in &cfg.alphas {
        for &seed in &cfg.seeds {
            let hash = train_hash(cfg, alpha, seed, None);
            let dir = run_dir(&out, &hash);
            let record = read_json::<RunRecord>(&dir.join(RECORD_FILE)).filter(|r| r.config_hash == hash);
            match (record, read_json::<CellMetrics>(&metrics_file(&dir, &eval))) {
                (Some(record), Some(metrics)) => {
                    failures.extend(metrics.failures.iter().map(|f| Failure { alpha: Some(alpha), seed, iterations: None, stage: f.stage.clone(), message: f.message.clone() }));
                    cells.push(CellResult { alpha, seed, record, metrics, dir });
                }
                _ => failures.push(Failure { alpha: Some(alpha), seed, iterations: None, stage: "collect".into(), message: format!("no stored run in {}", dir.display()) }),
            }
        }
    }
    let mut adversarial = Vec::new();
    for &seed in &cfg.adversarial_training.seeds {
        for &iterations in &cfg.adversarial_training.iterations {
            let attack = cfg.adversarial_training.attack(iterations);
            let hash = train_hash(cfg, 0.0, seed, attack.as_ref());
            let dir = run_dir(&out, &hash);
            let record = read_json::<RunRecord>(&dir.join(RECORD_FILE)).filter(|r| r.config_hash == hash);
            match (record, read_json::<(f64, SelectivityReport)>(&dir.join(ADVERSARIAL_FILE))) {
                (Some(record), Some((clean_accuracy, selectivity))) => adversarial.push(AdversarialCell { iterations, seed, record, clean_accuracy, selectivity }),
                _ => failures.push(Failure { alpha: Some(0.0), seed, iterations: Some(iterations), stage: "collect".into(), message: format!("no stored run in {}", dir.display()) }),
            }
        }
    }
    let report = emit_report(&cells, &adversarial, &failures, cfg, &out.join("report"))?;
    Ok(SweepOutcome { cells, adversarial, failures, report })
}
