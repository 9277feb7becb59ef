//! One training run, cached on disk by configuration hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use selrob_core::attacks::AttackConfig;
use selrob_core::models::Network;
use selrob_core::rng::{mix_seed, Rng};
use selrob_core::training::{train, EpochStats};

use crate::config::{train_hash, ExperimentConfig};
use crate::data::{generate_synthetic_dataset, Splits};
use crate::error::{HarnessError, Result};

pub const RECORD_FILE: &str = "record.json";
pub const BEST_CHECKPOINT: &str = "best";

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5e1f;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub alpha: f64,
    pub seed: u64,
    pub adversarial: Option<AttackConfig>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Relative to the run directory.
    pub checkpoint: PathBuf,
    pub epoch_checkpoints: Vec<PathBuf>,
}

impl RunRecord {
    pub fn best_val_accuracy(&self) -> f64 {
        self.history[self.best_epoch].val_accuracy
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub record: RunRecord,
    /// Weights of the selected epoch.
    pub network: Network,
    pub dir: PathBuf,
    pub cached: bool,
}

pub fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

pub fn run_dir(out: &Path, hash: &str) -> PathBuf {
    runs_dir(out).join(&hash[..16])
}

/// Loads STNS splits from `data.path`, or renders the synthetic set.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    match &cfg.data.path {
        Some(p) => Splits::load(p),
        None => generate_synthetic_dataset(&cfg.data.synthetic),
    }
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(|source| HarnessError::Unwritable { path: tmp.clone(), source })?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Option<T> {
    serde_json::from_slice(&fs::read(path).ok()?).ok()
}

fn cached(dir: &Path, hash: &str) -> Option<TrainedRun> {
    let record: RunRecord = read_json(&dir.join(RECORD_FILE))?;
    if record.config_hash != hash {
        return None;
    }
    let network = Network::load(dir.join(&record.checkpoint)).ok()?;
    Some(TrainedRun { record, network, dir: dir.to_path_buf(), cached: true })
}

/// Trains one `(alpha, seed)` cell, or reuses its checkpoint when a record
/// with the same training hash exists.
///
/// Initialization and minibatch order depend only on `seed`, so runs that
/// differ in `alpha` start from identical weights.
pub fn train_run(cfg: &ExperimentConfig, splits: &Splits, alpha: f64, seed: u64, adversarial: Option<AttackConfig>) -> Result<TrainedRun> {
    let out = cfg.resolved_output_dir();
    let hash = train_hash(cfg, alpha, seed, adversarial.as_ref());
    let dir = run_dir(&out, &hash);
    if let Some(run) = cached(&dir, &hash) {
        return Ok(run);
    }
    fs::create_dir_all(&dir).map_err(|source| HarnessError::Unwritable { path: dir.clone(), source })?;

    let shape = splits.train.set.x.shape();
    let input = [shape[1], shape[2], shape[3]];
    let spec = cfg.model.network_spec(input, splits.classes);
    let mut net = Network::build(&spec, &mut Rng::new(mix_seed(seed, &[INIT_STREAM])))?;
    let opts = cfg.training.options(alpha, adversarial.clone());
    let outcome = train(&mut net, &splits.train.set, &splits.val.set, &opts, &mut Rng::new(mix_seed(seed, &[SHUFFLE_STREAM])))?;

    let best = outcome.best().clone();
    best.save(dir.join(BEST_CHECKPOINT))?;
    let mut epoch_checkpoints = Vec::new();
    if cfg.training.keep_epoch_checkpoints {
        for (e, snap) in outcome.snapshots.iter().enumerate() {
            let name = PathBuf::from(format!("epoch-{e:03}"));
            snap.save(dir.join(&name))?;
            epoch_checkpoints.push(name);
        }
    }
    let record = RunRecord {
        config_hash: hash,
        alpha,
        seed,
        adversarial,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        checkpoint: PathBuf::from(BEST_CHECKPOINT),
        epoch_checkpoints,
    };
    write_json_atomic(&dir.join(RECORD_FILE), &record)?;
    Ok(TrainedRun { record, network: best, dir, cached: false })
}
