//! Class selectivity index, its layerwise aggregation, and the
//! selectivity-regularized training loss.
//!
//! For a unit with class-conditional mean activations `m_1..m_C`:
//!
//! ```text
//! SI = (m_max - m_rest) / (m_max + m_rest + eps)
//! ```
//!
//! where `m_rest` is the mean of the `C - 1` non-maximal class means. The
//! network-level score averages within each layer first and then across
//! layers, so wide layers do not dominate.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{dead_units, DeadUnits, Network, UnitActivations};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Stabilizer in the selectivity denominator; makes all-zero units score 0.
pub const SI_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassConditionalMeans {
    pub taps: Vec<String>,
    /// Per tap, `[classes × units]`.
    pub means: Vec<Tensor>,
    pub counts: Vec<usize>,
}

/// Mean activation of every unit for every class in `0..classes`.
pub fn class_conditional_means(acts: &UnitActivations, labels: &[usize], classes: usize) -> Result<ClassConditionalMeans> {
    if acts.samples() != labels.len() {
        return Err(Error::Shape { op: "class_conditional_means", detail: format!("{} samples, {} labels", acts.samples(), labels.len()) });
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::Invalid(format!("label {l} out of range for {classes} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    let means = acts
        .layers
        .iter()
        .map(|m| {
            let u = m.shape()[1];
            let mut out = vec![0.0; classes * u];
            for (row, &l) in m.data().chunks(u).zip(labels) {
                out[l * u..(l + 1) * u].iter_mut().zip(row).for_each(|(o, a)| *o += a);
            }
            for (c, &n) in counts.iter().enumerate() {
                out[c * u..(c + 1) * u].iter_mut().for_each(|o| *o /= n as f64);
            }
            Tensor::new(vec![classes, u], out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassConditionalMeans { taps: acts.taps.clone(), means, counts })
}

/// Selectivity index of one unit from its class-conditional means.
///
/// With `eps == 0` and an all-zero unit the index is defined as 0.
pub fn selectivity_index(class_means: &[f64], eps: f64) -> Result<f64> {
    if class_means.len() < 2 {
        return Err(Error::Invalid(format!("selectivity needs at least 2 classes, got {}", class_means.len())));
    }
    if class_means.iter().any(|&m| m < 0.0 || !m.is_finite()) {
        return Err(Error::Invalid("class-conditional means must be finite and non-negative".into()));
    }
    if eps < 0.0 {
        return Err(Error::Invalid(format!("negative eps {eps}")));
    }
    // Lowest index wins ties; the value is the same either way.
    let (imax, mmax) = class_means.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let rest: f64 = class_means.iter().enumerate().filter(|&(i, _)| i != imax).map(|(_, v)| v).sum::<f64>() / (class_means.len() - 1) as f64;
    let den = mmax + rest + eps;
    Ok(if den > 0.0 { (mmax - rest) / den } else { 0.0 })
}

/// Per-layer means and the mean of those means.
pub fn mean_selectivity(per_layer: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    if per_layer.is_empty() {
        return Err(Error::Empty("selectivity layers"));
    }
    let layer_means = per_layer
        .iter()
        .map(|l| if l.is_empty() { Err(Error::Empty("selectivity layer")) } else { Ok(l.iter().sum::<f64>() / l.len() as f64) })
        .collect::<Result<Vec<_>>>()?;
    let network = layer_means.iter().sum::<f64>() / layer_means.len() as f64;
    Ok((layer_means, network))
}

#[derive(Debug, Clone, Copy)]
pub struct RegularizedLoss {
    pub loss: Var,
    pub cross_entropy: Var,
    /// Minibatch selectivity; absent only when `alpha == 0` and the batch
    /// holds a single class.
    pub mean_si: Option<Var>,
}

/// `cross_entropy - alpha * mean_si`, with the selectivity of every tap
/// computed on the current minibatch over the classes it contains.
///
/// With `alpha == 0` the loss node is the cross-entropy itself; selectivity
/// is still recorded for monitoring but does not enter the gradient.
pub fn regularized_loss(tape: &mut Tape, logits: Var, labels: &[usize], taps: &[Var], alpha: f64) -> Result<RegularizedLoss> {
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    if alpha == 0.0 {
        let mean_si = if distinct_classes(labels) >= 2 { Some(minibatch_mean_selectivity(tape, taps, labels)?) } else { None };
        return Ok(RegularizedLoss { loss: ce, cross_entropy: ce, mean_si });
    }
    let mean_si = minibatch_mean_selectivity(tape, taps, labels)?;
    let penalty = tape.scalar_mul(mean_si, -alpha)?;
    let loss = tape.add(ce, penalty)?;
    Ok(RegularizedLoss { loss, cross_entropy: ce, mean_si: Some(mean_si) })
}

fn distinct_classes(labels: &[usize]) -> usize {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Differentiable mean-of-layer-means selectivity on a minibatch.
pub fn minibatch_mean_selectivity(tape: &mut Tape, taps: &[Var], labels: &[usize]) -> Result<Var> {
    if taps.is_empty() {
        return Err(Error::Empty("selectivity taps"));
    }
    let mut total: Option<Var> = None;
    for &t in taps {
        let si = tape.class_selectivity(t, labels, SI_EPS)?;
        let m = tape.mean(si)?;
        total = Some(match total {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    tape.scalar_mul(total.expect("non-empty"), 1.0 / taps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub alpha: f64,
    pub taps: Vec<String>,
    pub unit_si: Vec<Vec<f64>>,
    pub layer_mean: Vec<f64>,
    pub network_mean: f64,
    pub dead_mask: Vec<Vec<bool>>,
    pub dead_proportion: Vec<f64>,
    /// Layer means over live units only; `None` when every unit is dead.
    pub layer_mean_live: Vec<Option<f64>>,
    /// Mean over layers that have at least one live unit.
    pub network_mean_live: Option<f64>,
}

impl SelectivityReport {
    pub fn from_activations(acts: &UnitActivations, labels: &[usize], classes: usize, alpha: f64, dead_threshold: f64) -> Result<Self> {
        if acts.samples() == 0 {
            return Err(Error::Empty("dataset"));
        }
        let ccm = class_conditional_means(acts, labels, classes)?;
        let unit_si = ccm
            .means
            .iter()
            .map(|m| {
                let u = m.shape()[1];
                (0..u).map(|j| selectivity_index(&(0..classes).map(|c| m.data()[c * u + j]).collect::<Vec<_>>(), SI_EPS)).collect()
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let (layer_mean, network_mean) = mean_selectivity(&unit_si)?;
        let DeadUnits { proportions, mask, .. } = dead_units(acts, dead_threshold)?;
        let layer_mean_live: Vec<Option<f64>> = unit_si
            .iter()
            .zip(&mask)
            .map(|(si, dead)| {
                let live: Vec<f64> = si.iter().zip(dead).filter(|(_, &d)| !d).map(|(s, _)| *s).collect();
                (!live.is_empty()).then(|| live.iter().sum::<f64>() / live.len() as f64)
            })
            .collect();
        let live: Vec<f64> = layer_mean_live.iter().flatten().copied().collect();
        let network_mean_live = (!live.is_empty()).then(|| live.iter().sum::<f64>() / live.len() as f64);
        Ok(SelectivityReport {
            alpha,
            taps: acts.taps.clone(),
            unit_si,
            layer_mean,
            network_mean,
            dead_mask: mask,
            dead_proportion: proportions,
            layer_mean_live,
            network_mean_live,
        })
    }

    /// `layer,unit,si,dead` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,unit,si,dead")?;
        for (l, tap) in self.taps.iter().enumerate() {
            for (u, si) in self.unit_si[l].iter().enumerate() {
                writeln!(w, "{tap},{u},{si},{}", self.dead_mask[l][u] as u8)?;
            }
        }
        Ok(())
    }
}

/// Test-set selectivity of a trained network in evaluation mode.
pub fn selectivity_report(net: &Network, x: &Tensor, labels: &[usize], alpha: f64, dead_threshold: f64) -> Result<SelectivityReport> {
    if labels.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let (_, acts) = net.forward_with_taps(x)?;
    SelectivityReport::from_activations(&acts, labels, net.classes(), alpha, dead_threshold)
}
