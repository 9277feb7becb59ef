//! Minibatch training with the selectivity-regularized loss.

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_in_mode, AttackConfig};
use crate::error::{Error, Result};
use crate::models::{Mode, Network};
use crate::optim::Sgd;
use crate::rng::Rng;
use crate::selectivity::regularized_loss;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Step schedule: `lr = initial * factor^(number of anneal epochs <= epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub anneal_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let k = self.anneal_epochs.iter().filter(|&&e| e <= epoch).count();
        self.initial * self.factor.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    /// When set, every minibatch is replaced by its PGD perturbation.
    pub adversarial: Option<AttackConfig>,
    /// Rescale the full gradient to this l2 norm when it is larger.
    pub clip_norm: Option<f64>,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch size must be positive".into()));
        }
        if !(self.schedule.factor > 0.0 && self.schedule.factor <= 1.0) {
            return Err(Error::Invalid(format!("anneal factor {} outside (0, 1]", self.schedule.factor)));
        }
        Sgd::new(self.schedule.initial, self.momentum, self.weight_decay)?;
        if let Some(a) = &self.adversarial {
            a.validate()?;
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Invalid(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_cross_entropy: f64,
    /// Mean of the per-minibatch selectivity over the epoch.
    pub minibatch_si: f64,
    /// Minibatches whose gradient was rescaled by `clip_norm`.
    pub clipped_batches: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    /// Epoch (0-based) with the highest validation accuracy; earliest on ties.
    pub best_epoch: usize,
    /// Network state at the end of every epoch.
    pub snapshots: Vec<Network>,
}

impl TrainOutcome {
    pub fn best(&self) -> &Network {
        &self.snapshots[self.best_epoch]
    }

    pub fn last(&self) -> &Network {
        self.snapshots.last().expect("at least one epoch")
    }
}

/// Labeled image set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<LabeledSet> {
        Ok(LabeledSet { x: self.x.select_rows(idx)?, y: idx.iter().map(|&i| self.y[i]).collect() })
    }

    pub fn head(&self, n: usize) -> Result<LabeledSet> {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }
}

/// Argmax of validation accuracy, earliest epoch on ties.
pub fn best_epoch(val_accuracy: &[f64]) -> Option<usize> {
    val_accuracy.iter().enumerate().fold(None, |best: Option<(usize, f64)>, (i, &a)| match best {
        Some((_, b)) if a <= b => best,
        _ => Some((i, a)),
    }).map(|(i, _)| i)
}

/// Trains `net` in place. Minibatch order is drawn from `rng` each epoch.
pub fn train(net: &mut Network, train: &LabeledSet, val: &LabeledSet, opts: &TrainOptions, rng: &mut Rng) -> Result<TrainOutcome> {
    opts.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training or validation set"));
    }
    let mut opt = Sgd::new(opts.schedule.initial, opts.momentum, opts.weight_decay)?;
    let mut history = Vec::with_capacity(opts.epochs);
    let mut snapshots = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..opts.epochs {
        opt.learning_rate = opts.schedule.at(epoch);
        rng.shuffle(&mut order);
        let (mut loss_sum, mut ce_sum, mut si_sum, mut batches, mut si_batches, mut clipped) = (0.0, 0.0, 0.0, 0usize, 0usize, 0usize);
        for (b, idx) in order.chunks(opts.batch_size).enumerate() {
            let batch = train.subset(idx)?;
            let x = match &opts.adversarial {
                Some(cfg) if cfg.iterations > 0 => pgd_in_mode(net, &batch.x, &batch.y, cfg, Mode::Train)?,
                _ => batch.x,
            };
            let mut tape = Tape::new();
            let xv = tape.leaf(x, false);
            let pass = net.forward(&mut tape, xv, Mode::Train, true)?;
            let reg = regularized_loss(&mut tape, pass.logits, &batch.y, &pass.taps, opts.alpha)?;
            let loss = tape.value(reg.loss).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}: {loss}")));
            }
            tape.backward(reg.loss)?;
            net.accumulate_grads(&tape, &pass)?;
            if let Some(c) = opts.clip_norm {
                clipped += clip_grad_norm(&mut net.params_mut(), c)? as usize;
            }
            net.update_running_stats(&pass.bn_stats);
            opt.step(&mut net.params_mut())?;
            loss_sum += loss;
            ce_sum += tape.value(reg.cross_entropy).item();
            if let Some(si) = reg.mean_si {
                si_sum += tape.value(si).item();
                si_batches += 1;
            }
            batches += 1;
        }
        let val_accuracy = net.accuracy(&val.x, &val.y)?;
        history.push(EpochStats {
            epoch,
            learning_rate: opt.learning_rate,
            train_loss: loss_sum / batches as f64,
            train_cross_entropy: ce_sum / batches as f64,
            minibatch_si: if si_batches > 0 { si_sum / si_batches as f64 } else { 0.0 },
            clipped_batches: clipped,
            val_accuracy,
        });
        snapshots.push(net.clone());
    }
    let acc: Vec<f64> = history.iter().map(|h| h.val_accuracy).collect();
    let best_epoch = best_epoch(&acc).expect("at least one epoch");
    Ok(TrainOutcome { history, best_epoch, snapshots })
}

/// Scales all accumulated gradients by a common factor so their joint l2
/// norm is at most `max_norm`. Returns whether scaling happened; a
/// non-finite norm is reported as divergence.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> Result<bool> {
    let sq: f64 = params.iter().filter_map(|p| p.grad.as_ref()).flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    if norm <= max_norm {
        return Ok(false);
    }
    let k = max_norm / norm;
    for p in params.iter_mut() {
        if let Some(g) = p.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(true)
}
