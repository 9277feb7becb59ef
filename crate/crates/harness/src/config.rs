//! Experiment configuration.
//!
//! Configs are TOML documents; every table and key is optional and falls
//! back to the desk-scale defaults below. A minimal file:
//!
//! ```toml
//! output_dir = "runs/pilot"
//! alphas = [-1.0, 0.0, 1.0]
//! seeds = [0, 1, 2]
//!
//! [training]
//! epochs = 10
//! anneal_epochs = [6, 8]
//! ```
//!
//! Relative `output_dir` values are resolved under `$SELROB_OUTPUT_ROOT`
//! when that variable is set.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use selrob_core::attacks::AttackConfig;
use selrob_core::models::{ConvBlock, NetworkSpec, Pool};
use selrob_core::training::{LrSchedule, TrainOptions};

use crate::data::SyntheticSpec;
use crate::error::{HarnessError, Result};

pub const OUTPUT_ROOT_ENV: &str = "SELROB_OUTPUT_ROOT";

/// Fixed small PGD step suited to long-trained full-size networks.
pub const FINE_PGD_STEP: f64 = 0.0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub attacks: AttackSettings,
    pub corruptions: CorruptionSettings,
    pub analysis: AnalysisSettings,
    pub adversarial_training: AdversarialTrainingSettings,
    pub report: ReportSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("selrob-out"),
            alphas: vec![-2.0, -1.0, -0.5, -0.2, 0.0, 0.2, 0.5, 1.0, 2.0],
            seeds: vec![0, 1, 2, 3, 4],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            attacks: AttackSettings::default(),
            corruptions: CorruptionSettings::default(),
            analysis: AnalysisSettings::default(),
            adversarial_training: AdversarialTrainingSettings::default(),
            report: ReportSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    /// Directory of STNS splits written by `gen-data`; overrides `synthetic`.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { synthetic: SyntheticSpec::default(), path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub batchnorm: bool,
    pub pool: Pool,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { conv_channels: vec![16, 32, 64], kernel: 3, batchnorm: true, pool: Pool::Avg, hidden: vec![64] }
    }
}

impl ModelConfig {
    pub fn network_spec(&self, input: [usize; 3], classes: usize) -> NetworkSpec {
        let blocks = self
            .conv_channels
            .iter()
            .map(|&c| ConvBlock { channels: c, kernel: self.kernel, stride: 1, batchnorm: self.batchnorm, pool: self.pool })
            .collect();
        NetworkSpec { input, blocks, hidden: self.hidden.clone(), classes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub anneal_epochs: Vec<usize>,
    pub anneal_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Persist every epoch's weights, not only the selected one.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.05,
            anneal_epochs: vec![12, 17],
            anneal_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            keep_epoch_checkpoints: false,
        }
    }
}

impl TrainingConfig {
    pub fn options(&self, alpha: f64, adversarial: Option<AttackConfig>) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: LrSchedule { initial: self.learning_rate, anneal_epochs: self.anneal_epochs.clone(), factor: self.anneal_factor },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            alpha,
            adversarial,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

/// How the PGD step size is derived from the budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum StepRule {
    EpsOverTen,
    Fine,
    Fixed(f64),
}

impl StepRule {
    pub fn step(self, epsilon: f64) -> f64 {
        match self {
            StepRule::EpsOverTen => epsilon / 10.0,
            StepRule::Fine => FINE_PGD_STEP,
            StepRule::Fixed(v) => v,
        }
    }

    pub fn name(self) -> String {
        match self {
            StepRule::EpsOverTen => "eps_over_ten".into(),
            StepRule::Fine => "fine".into(),
            StepRule::Fixed(v) => format!("fixed:{v}"),
        }
    }
}

/// Budgets are given in units of 1/255.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub fgsm_epsilons: Vec<f64>,
    pub pgd_epsilon: f64,
    pub pgd_steps: Vec<usize>,
    pub pgd_step: StepRule,
    /// Test samples attacked; 0 means the whole test split.
    pub samples: usize,
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings {
            fgsm_epsilons: vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0],
            pgd_epsilon: 16.0,
            pgd_steps: vec![0, 1, 2, 5, 10, 20, 40],
            pgd_step: StepRule::EpsOverTen,
            samples: 0,
        }
    }
}

impl AttackSettings {
    pub fn pgd_config(&self, iterations: usize) -> AttackConfig {
        let eps = self.pgd_epsilon / 255.0;
        AttackConfig::pgd(eps, self.pgd_step.step(eps), iterations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSettings {
    pub enabled: bool,
    pub suite_seed: u64,
}

impl Default for CorruptionSettings {
    fn default() -> Self {
        CorruptionSettings { enabled: true, suite_seed: 2024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Activation at or below which a unit counts as silent.
    pub dead_threshold: f64,
    pub jacobian: bool,
    pub jacobian_samples: usize,
    pub gradient_cv: bool,
    pub cv_samples: usize,
    pub dimensionality: bool,
    pub thresholds: Vec<f64>,
    pub twonn_discard: f64,
    pub dimensionality_pgd_steps: usize,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            dead_threshold: 0.0,
            jacobian: true,
            jacobian_samples: 64,
            gradient_cv: true,
            cv_samples: 64,
            dimensionality: true,
            thresholds: selrob_core::analysis::DEFAULT_THRESHOLDS.to_vec(),
            twonn_discard: selrob_core::analysis::DEFAULT_TWONN_DISCARD,
            dimensionality_pgd_steps: 40,
        }
    }
}

/// PGD-training sweep at `alpha = 0`: one run per (iterations, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialTrainingSettings {
    pub iterations: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epsilon: f64,
    pub step: StepRule,
}

impl Default for AdversarialTrainingSettings {
    fn default() -> Self {
        AdversarialTrainingSettings { iterations: Vec::new(), seeds: Vec::new(), epsilon: 16.0, step: StepRule::EpsOverTen }
    }
}

impl AdversarialTrainingSettings {
    pub fn attack(&self, iterations: usize) -> Option<AttackConfig> {
        let eps = self.epsilon / 255.0;
        (iterations > 0).then(|| AttackConfig::pgd(eps, self.step.step(eps), iterations))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub confidence: f64,
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings { bootstrap_resamples: 1000, bootstrap_seed: 7, confidence: 0.95 }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.alphas.is_empty() || self.seeds.is_empty() {
            return bad("need at least one alpha and one seed".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !a.is_finite()) {
            return bad(format!("alpha {a}"));
        }
        let t = &self.training;
        if !(t.anneal_factor > 0.0 && t.anneal_factor <= 1.0) {
            return bad(format!("anneal factor {} outside (0, 1]", t.anneal_factor));
        }
        if !(t.clip_norm >= 0.0 && t.clip_norm.is_finite()) {
            return bad(format!("clip norm {}", t.clip_norm));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if self.model.conv_channels.is_empty() && self.model.hidden.is_empty() {
            return bad("model has no tapped layers".into());
        }
        if self.attacks.fgsm_epsilons.iter().any(|e| !(*e >= 0.0)) || !(self.attacks.pgd_epsilon >= 0.0) {
            return bad("attack budgets must be non-negative".into());
        }
        if let StepRule::Fixed(v) = self.attacks.pgd_step {
            if !(v > 0.0) {
                return bad(format!("PGD step {v}"));
            }
        }
        let a = &self.analysis;
        if a.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad(format!("thresholds {:?} outside (0, 1]", a.thresholds));
        }
        if !(0.0..1.0).contains(&a.twonn_discard) {
            return bad(format!("TwoNN discard {}", a.twonn_discard));
        }
        if a.gradient_cv && a.cv_samples < 2 {
            return bad("gradient CV needs at least 2 samples".into());
        }
        if !self.adversarial_training.iterations.is_empty() && self.adversarial_training.seeds.is_empty() {
            return bad("adversarial training iterations given without seeds".into());
        }
        let r = &self.report;
        if r.bootstrap_resamples == 0 || !(r.confidence > 0.0 && r.confidence < 1.0) {
            return bad("bootstrap needs resamples > 0 and confidence in (0, 1)".into());
        }
        Ok(())
    }

    /// Output directory after applying `$SELROB_OUTPUT_ROOT`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Everything that determines a trained network.
#[derive(Serialize)]
struct TrainKey<'a> {
    version: u32,
    data: &'a DataConfig,
    model: &'a ModelConfig,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    anneal_epochs: &'a [usize],
    anneal_factor: f64,
    momentum: f64,
    weight_decay: f64,
    clip_norm: f64,
    alpha: f64,
    seed: u64,
    adversarial: Option<&'a AttackConfig>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of every field that affects training of one run.
pub fn train_hash(cfg: &ExperimentConfig, alpha: f64, seed: u64, adversarial: Option<&AttackConfig>) -> String {
    let t = &cfg.training;
    let key = TrainKey {
        version: 1,
        data: &cfg.data,
        model: &cfg.model,
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        anneal_epochs: &t.anneal_epochs,
        anneal_factor: t.anneal_factor,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
        clip_norm: t.clip_norm,
        alpha,
        seed,
        adversarial,
    };
    sha_hex(&serde_json::to_vec(&key).expect("key serializes"))
}

/// Hash of every field that affects evaluation of a trained run.
pub fn eval_hash(cfg: &ExperimentConfig) -> String {
    let key = (1u32, &cfg.attacks, &cfg.corruptions, &cfg.analysis);
    sha_hex(&serde_json::to_vec(&key).expect("key serializes"))
}

/// Parses `"a,b,c"` into values.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|_| HarnessError::Config(format!("cannot parse list item {p:?}"))))
        .collect()
}
