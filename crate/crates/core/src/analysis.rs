//! Gradient-variability statistics and representational dimensionality.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig};
use crate::corruptions::{corrupt_batch, CorruptionKind};
use crate::error::{Error, Result};
use crate::models::Network;
use crate::tensor::Tensor;

/// Cumulative explained variance within this of a threshold counts as reaching it.
const THRESHOLD_SLACK: f64 = 1e-10;

/// Total variance below this fraction of the mean squared row norm is zero.
const ZERO_VARIANCE_REL: f64 = 1e-20;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.90, 0.95, 0.99];
pub const DEFAULT_TWONN_DISCARD: f64 = 0.1;

/// Input-unit gradient variability for one layer.
///
/// Standard deviations use the population convention. A coefficient of
/// variation is `None` when its mean is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVariabilityReport {
    pub mu_u: Vec<f64>,
    pub sigma_u: Vec<f64>,
    pub cv_u: Vec<Option<f64>>,
    pub mu_l: f64,
    pub sigma_l: f64,
    pub cv_l: Option<f64>,
}

impl GradientVariabilityReport {
    /// Mean of the defined per-unit CVs.
    pub fn mean_cv_u(&self) -> Option<f64> {
        let v: Vec<f64> = self.cv_u.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn ratio(sigma: f64, mu: f64) -> Option<f64> {
    (mu > 0.0).then(|| sigma / mu)
}

/// CVs of a `[samples × units]` matrix of gradient norms: per unit across
/// samples, and across the units' means.
pub fn gradient_cv(norms: &Tensor) -> Result<GradientVariabilityReport> {
    if norms.rank() != 2 || norms.shape()[0] < 2 || norms.shape()[1] < 2 {
        return Err(Error::Invalid(format!("gradient_cv needs at least 2 samples and 2 units, got {:?}", norms.shape())));
    }
    if norms.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Invalid("all gradient norms are zero".into()));
    }
    let (n, u) = (norms.shape()[0], norms.shape()[1]);
    let d = norms.data();
    let mut mu_u = Vec::with_capacity(u);
    let mut sigma_u = Vec::with_capacity(u);
    for j in 0..u {
        let (m, s) = mean_std((0..n).map(|i| d[i * u + j]));
        mu_u.push(m);
        sigma_u.push(s);
    }
    let cv_u = mu_u.iter().zip(&sigma_u).map(|(&m, &s)| ratio(s, m)).collect();
    let (mu_l, sigma_l) = mean_std(mu_u.iter().copied());
    Ok(GradientVariabilityReport { cv_l: ratio(sigma_l, mu_l), mu_u, sigma_u, cv_u, mu_l, sigma_l })
}

/// Explained-variance ratios (descending) of the column-centered data, or
/// `None` when the total variance is zero.
pub fn explained_variance_ratios(acts: &Tensor) -> Result<Option<Vec<f64>>> {
    if acts.rank() != 2 || acts.shape()[0] < 2 {
        return Err(Error::Invalid(format!("PCA needs a [samples × units] matrix with at least 2 samples, got {:?}", acts.shape())));
    }
    let (n, u) = (acts.shape()[0], acts.shape()[1]);
    let mut m = DMatrix::from_row_slice(n, u, acts.data());
    for j in 0..u {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = (m.transpose() * &m) / (n as f64 - 1.0);
    let total = cov.trace();
    // Variance at rounding level (e.g. a constant offset subtracted row by
    // row) is treated as none.
    let scale = acts.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(total > ZERO_VARIANCE_REL * scale) {
        return Ok(None);
    }
    let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let s: f64 = eig.iter().sum();
    if !(s > 0.0) {
        return Ok(None);
    }
    Ok(Some(eig.into_iter().map(|v| v / s).collect()))
}

/// Smallest `k` whose cumulative ratio reaches `threshold`.
pub fn components_for(ratios: &[f64], threshold: f64) -> usize {
    let mut acc = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        acc += r;
        if acc >= threshold - THRESHOLD_SLACK {
            return i + 1;
        }
    }
    ratios.len()
}

/// `(count, count / units)` at each threshold; zero-variance data gives `(0, 0)`.
pub fn linear_dimensionality_multi(acts: &Tensor, thresholds: &[f64]) -> Result<Vec<(usize, f64)>> {
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Invalid(format!("variance threshold {t} outside (0, 1]")));
    }
    let u = acts.shape().get(1).copied().unwrap_or(0);
    Ok(match explained_variance_ratios(acts)? {
        None => thresholds.iter().map(|_| (0, 0.0)).collect(),
        Some(r) => thresholds
            .iter()
            .map(|&t| {
                let c = components_for(&r, t);
                (c, c as f64 / u as f64)
            })
            .collect(),
    })
}

pub fn linear_dimensionality(acts: &Tensor, threshold: f64) -> Result<(usize, f64)> {
    Ok(linear_dimensionality_multi(acts, &[threshold])?[0])
}

fn difference(clean: &Tensor, perturbed: &Tensor) -> Result<Tensor> {
    if clean.shape() != perturbed.shape() {
        return Err(Error::Shape { op: "difference_dimensionality", detail: format!("{:?} vs {:?}", clean.shape(), perturbed.shape()) });
    }
    Tensor::new(clean.shape().to_vec(), clean.data().iter().zip(perturbed.data()).map(|(a, b)| a - b).collect())
}

/// PCA dimensionality of `clean - perturbed` (rows paired by sample).
pub fn difference_dimensionality(clean: &Tensor, perturbed: &Tensor, threshold: f64) -> Result<(usize, f64)> {
    linear_dimensionality(&difference(clean, perturbed)?, threshold)
}

/// TwoNN intrinsic dimension of the rows of `points: [n × d]`.
///
/// Exact duplicate rows are collapsed first. For each point the ratio of
/// second- to first-neighbor distance is computed; the `discard_fraction`
/// largest ratios are dropped and the dimension is the zero-intercept
/// least-squares slope of `-ln(1 - F)` on `ln(ratio)`, with `F` the
/// empirical CDF `i / n`.
pub fn twonn_id(points: &Tensor, discard_fraction: f64) -> Result<f64> {
    if points.rank() != 2 {
        return Err(Error::Shape { op: "twonn_id", detail: format!("{:?}", points.shape()) });
    }
    if !(0.0..1.0).contains(&discard_fraction) {
        return Err(Error::Invalid(format!("discard fraction {discard_fraction} outside [0, 1)")));
    }
    let d = points.shape()[1];
    let mut seen = HashSet::new();
    let rows: Vec<&[f64]> = points
        .data()
        .chunks(d)
        .filter(|r| seen.insert(r.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect::<Vec<u64>>()))
        .collect();
    let n = rows.len();
    if n < 10 {
        return Err(Error::Invalid(format!("TwoNN needs at least 10 distinct points, got {n}")));
    }
    let mut mus = Vec::with_capacity(n);
    for (i, a) in rows.iter().enumerate() {
        let (mut r1, mut r2) = (f64::INFINITY, f64::INFINITY);
        for (j, b) in rows.iter().enumerate() {
            if i == j {
                continue;
            }
            let dist: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            if dist < r1 {
                r2 = r1;
                r1 = dist;
            } else if dist < r2 {
                r2 = dist;
            }
        }
        mus.push((r2 / r1).sqrt());
    }
    mus.sort_by(f64::total_cmp);
    let keep = ((n as f64) * (1.0 - discard_fraction)).floor() as usize;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, mu) in mus.iter().take(keep).enumerate() {
        let x = mu.ln();
        let y = -(1.0 - i as f64 / n as f64).ln();
        sxy += x * y;
        sxx += x * x;
    }
    if !(sxx > 0.0) {
        return Err(Error::Invalid("TwoNN ratios are degenerate".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimensionalityMode {
    Clean,
    DifferenceAverageCase,
    DifferenceWorstCase,
}

impl DimensionalityMode {
    pub fn name(self) -> &'static str {
        match self {
            DimensionalityMode::Clean => "clean",
            DimensionalityMode::DifferenceAverageCase => "difference-average-case",
            DimensionalityMode::DifferenceWorstCase => "difference-worst-case",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionalityReport {
    pub mode: DimensionalityMode,
    pub taps: Vec<String>,
    pub thresholds: Vec<f64>,
    /// `counts[tap][threshold]`; averaged over cells for corruption differences.
    pub counts: Vec<Vec<f64>>,
    pub fractions: Vec<Vec<f64>>,
    /// TwoNN estimate per tap; `None` when the matrix is too degenerate.
    pub twonn: Vec<Option<f64>>,
    pub twonn_fraction: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub enum PerturbationSource {
    None,
    /// Every (kind, severity) cell of the corruption suite, averaged.
    Corruptions { suite_seed: u64 },
    Pgd(AttackConfig),
}

fn profile_of(mats: &[Tensor], thresholds: &[f64], discard: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Option<f64>>)> {
    let mut counts = Vec::new();
    let mut fractions = Vec::new();
    let mut ids = Vec::new();
    for m in mats {
        let r = linear_dimensionality_multi(m, thresholds)?;
        counts.push(r.iter().map(|c| c.0 as f64).collect());
        fractions.push(r.iter().map(|c| c.1).collect());
        ids.push(twonn_id(m, discard).ok());
    }
    Ok((counts, fractions, ids))
}

/// Per-tap PCA and TwoNN dimensionality of clean activations, or of
/// clean-minus-perturbed difference matrices. Evaluation mode throughout.
pub fn layerwise_dimensionality_profile(net: &Network, x: &Tensor, y: &[usize], source: &PerturbationSource, thresholds: &[f64], discard: f64) -> Result<DimensionalityReport> {
    let (_, clean) = net.forward_with_taps(x)?;
    let widths: Vec<f64> = clean.layers.iter().map(|m| m.shape()[1] as f64).collect();
    let taps = clean.taps.clone();
    let (mode, counts, fractions, twonn) = match source {
        PerturbationSource::None => {
            let (c, f, i) = profile_of(&clean.layers, thresholds, discard)?;
            (DimensionalityMode::Clean, c, f, i)
        }
        PerturbationSource::Pgd(cfg) => {
            let adv = pgd(net, x, y, cfg)?.perturbed;
            let (_, pert) = net.forward_with_taps(&adv)?;
            let diffs = clean.layers.iter().zip(&pert.layers).map(|(a, b)| difference(a, b)).collect::<Result<Vec<_>>>()?;
            let (c, f, i) = profile_of(&diffs, thresholds, discard)?;
            (DimensionalityMode::DifferenceWorstCase, c, f, i)
        }
        PerturbationSource::Corruptions { suite_seed } => {
            let l = clean.layers.len();
            let mut csum = vec![vec![0.0; thresholds.len()]; l];
            let mut fsum = vec![vec![0.0; thresholds.len()]; l];
            let mut isum = vec![(0.0, 0usize); l];
            let mut cells = 0.0;
            for kind in CorruptionKind::ALL {
                for sev in 1..=5 {
                    let xc = corrupt_batch(x, kind, sev, *suite_seed)?;
                    let (_, pert) = net.forward_with_taps(&xc)?;
                    let diffs = clean.layers.iter().zip(&pert.layers).map(|(a, b)| difference(a, b)).collect::<Result<Vec<_>>>()?;
                    let (c, f, i) = profile_of(&diffs, thresholds, discard)?;
                    for t in 0..l {
                        csum[t].iter_mut().zip(&c[t]).for_each(|(a, b)| *a += b);
                        fsum[t].iter_mut().zip(&f[t]).for_each(|(a, b)| *a += b);
                        if let Some(v) = i[t] {
                            isum[t].0 += v;
                            isum[t].1 += 1;
                        }
                    }
                    cells += 1.0;
                }
            }
            let avg = |m: Vec<Vec<f64>>| m.into_iter().map(|r| r.into_iter().map(|v| v / cells).collect()).collect();
            let ids = isum.into_iter().map(|(s, k)| (k > 0).then(|| s / k as f64)).collect();
            (DimensionalityMode::DifferenceAverageCase, avg(csum), avg(fsum), ids)
        }
    };
    let twonn_fraction = twonn.iter().zip(&widths).map(|(id, w)| id.map(|v| v / w)).collect();
    Ok(DimensionalityReport { mode, taps, thresholds: thresholds.to_vec(), counts, fractions, twonn, twonn_fraction })
}
