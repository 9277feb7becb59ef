//! Post-training measurements of one run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use selrob_core::analysis::{gradient_cv, layerwise_dimensionality_profile, DimensionalityReport, GradientVariabilityReport, PerturbationSource};
use selrob_core::attacks::{fgsm, input_unit_gradient_norms, jacobian_norm, pgd_trajectory, AttackConfig, JacobianNorm};
use selrob_core::corruptions::{corruption_suite_eval, CorruptionSuiteResult};
use selrob_core::models::Network;
use selrob_core::selectivity::{selectivity_report, SelectivityReport};
use selrob_core::training::LabeledSet;

use crate::config::ExperimentConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgsmPoint {
    /// Budget in units of 1/255.
    pub epsilon: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdCurve {
    pub epsilon: f64,
    pub step_size: f64,
    pub step_rule: String,
    /// `(steps, accuracy)`
    pub points: Vec<(usize, f64)>,
}

impl PgdCurve {
    pub fn accuracy_at(&self, steps: usize) -> Option<f64> {
        self.points.iter().find(|p| p.0 == steps).map(|p| p.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapVariability {
    pub tap: String,
    /// `None` when every input-unit gradient of the tap is zero.
    pub report: Option<GradientVariabilityReport>,
}

/// Every measurement of one trained network. Stages that fail are `None`
/// with an entry in `failures`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub clean_accuracy: f64,
    pub selectivity: Option<SelectivityReport>,
    pub corruption: Option<CorruptionSuiteResult>,
    pub fgsm: Option<Vec<FgsmPoint>>,
    pub pgd: Option<PgdCurve>,
    pub jacobian_frobenius: Option<f64>,
    pub gradient_cv: Option<Vec<TapVariability>>,
    pub dimensionality: Option<Vec<DimensionalityReport>>,
    pub failures: Vec<StageFailure>,
}

impl CellMetrics {
    pub fn fgsm_accuracy(&self, epsilon: f64) -> Option<f64> {
        self.fgsm.as_ref()?.iter().find(|p| p.epsilon == epsilon).map(|p| p.accuracy)
    }

    /// Mean per-unit CV over the first `taps` taps.
    pub fn mean_cv_u(&self, taps: usize) -> Option<f64> {
        let v: Vec<f64> = self.gradient_cv.as_ref()?.iter().take(taps).filter_map(|t| t.report.as_ref()?.mean_cv_u()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn dimensionality_of(&self, mode: &str) -> Option<&DimensionalityReport> {
        self.dimensionality.as_ref()?.iter().find(|d| d.mode.name() == mode)
    }
}

fn stage<T>(failures: &mut Vec<StageFailure>, name: &str, f: impl FnOnce() -> Result<T>) -> Option<T> {
    match f() {
        Ok(v) => Some(v),
        Err(e) => {
            failures.push(StageFailure { stage: name.into(), message: e.to_string() });
            None
        }
    }
}

fn subset(test: &LabeledSet, n: usize) -> Result<LabeledSet> {
    if n == 0 {
        Ok(test.clone())
    } else {
        Ok(test.head(n)?)
    }
}

pub fn selectivity(cfg: &ExperimentConfig, net: &Network, test: &LabeledSet, alpha: f64) -> Result<SelectivityReport> {
    Ok(selectivity_report(net, &test.x, &test.y, alpha, cfg.analysis.dead_threshold)?)
}

pub fn fgsm_sweep(cfg: &ExperimentConfig, net: &Network, set: &LabeledSet) -> Result<Vec<FgsmPoint>> {
    cfg.attacks
        .fgsm_epsilons
        .iter()
        .map(|&e| Ok(FgsmPoint { epsilon: e, accuracy: fgsm(net, &set.x, &set.y, &AttackConfig::fgsm(e / 255.0))?.perturbed_accuracy }))
        .collect()
}

pub fn pgd_sweep(cfg: &ExperimentConfig, net: &Network, set: &LabeledSet) -> Result<PgdCurve> {
    let max = cfg.attacks.pgd_steps.iter().copied().max().unwrap_or(0);
    let attack = cfg.attacks.pgd_config(max);
    let traj = pgd_trajectory(net, &set.x, &set.y, &attack, &cfg.attacks.pgd_steps)?;
    Ok(PgdCurve {
        epsilon: cfg.attacks.pgd_epsilon,
        step_size: attack.step_size,
        step_rule: cfg.attacks.pgd_step.name(),
        points: traj.iter().map(|p| (p.steps, p.accuracy)).collect(),
    })
}

pub fn variability(cfg: &ExperimentConfig, net: &Network, test: &LabeledSet) -> Result<Vec<TapVariability>> {
    let set = subset(test, cfg.analysis.cv_samples)?;
    net.tap_names()
        .into_iter()
        .enumerate()
        .map(|(i, tap)| {
            let norms = input_unit_gradient_norms(net, &set.x, i)?;
            Ok(TapVariability { tap, report: gradient_cv(&norms).ok() })
        })
        .collect()
}

pub fn dimensionality(cfg: &ExperimentConfig, net: &Network, set: &LabeledSet) -> Result<Vec<DimensionalityReport>> {
    let a = &cfg.analysis;
    let mut sources = vec![PerturbationSource::None];
    if cfg.corruptions.enabled {
        sources.push(PerturbationSource::Corruptions { suite_seed: cfg.corruptions.suite_seed });
    }
    sources.push(PerturbationSource::Pgd(cfg.attacks.pgd_config(a.dimensionality_pgd_steps)));
    sources.iter().map(|s| Ok(layerwise_dimensionality_profile(net, &set.x, &set.y, s, &a.thresholds, a.twonn_discard)?)).collect()
}

/// Runs every enabled measurement against the test split.
pub fn evaluate(cfg: &ExperimentConfig, net: &Network, test: &LabeledSet, alpha: f64) -> Result<CellMetrics> {
    let clean_accuracy = net.accuracy(&test.x, &test.y)?;
    let attack_set = subset(test, cfg.attacks.samples)?;
    let mut failures = Vec::new();
    let f = &mut failures;
    let selectivity = stage(f, "selectivity", || selectivity(cfg, net, test, alpha));
    let corruption = if cfg.corruptions.enabled {
        stage(f, "corruption", || Ok(corruption_suite_eval(net, &test.x, &test.y, cfg.corruptions.suite_seed)?))
    } else {
        None
    };
    let fgsm = stage(f, "fgsm", || fgsm_sweep(cfg, net, &attack_set));
    let pgd = stage(f, "pgd", || pgd_sweep(cfg, net, &attack_set));
    let jacobian_frobenius = if cfg.analysis.jacobian {
        stage(f, "jacobian", || Ok(jacobian_norm(net, &subset(test, cfg.analysis.jacobian_samples)?.x, JacobianNorm::Frobenius)?.mean))
    } else {
        None
    };
    let gradient_cv = if cfg.analysis.gradient_cv { stage(f, "gradient_cv", || variability(cfg, net, test)) } else { None };
    let dimensionality = if cfg.analysis.dimensionality { stage(f, "dimensionality", || dimensionality(cfg, net, &attack_set)) } else { None };
    Ok(CellMetrics { clean_accuracy, selectivity, corruption, fgsm, pgd, jacobian_frobenius, gradient_cv, dimensionality, failures })
}

pub fn metrics_file(dir: &Path, eval_hash: &str) -> std::path::PathBuf {
    dir.join(format!("metrics-{}.json", &eval_hash[..16]))
}
