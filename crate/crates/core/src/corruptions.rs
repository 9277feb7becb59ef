//! Parametric image corruptions with five graded severities.
//!
//! | kind           | parameter               | severities 1..5               |
//! |----------------|-------------------------|-------------------------------|
//! | gaussian_noise | noise std               | 0.04 0.08 0.12 0.18 0.26      |
//! | shot_noise     | photon scale            | 60 25 12 5 3                  |
//! | brightness     | additive shift          | 0.1 0.2 0.3 0.4 0.5           |
//! | contrast       | factor about image mean | 0.75 0.6 0.45 0.3 0.2         |
//! | gaussian_blur  | kernel sigma, radius ⌈3σ⌉ | 0.4 0.6 0.9 1.3 1.8         |
//!
//! Every output is clamped to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Network;
use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    Brightness,
    Contrast,
    GaussianBlur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] =
        [CorruptionKind::GaussianNoise, CorruptionKind::ShotNoise, CorruptionKind::Brightness, CorruptionKind::Contrast, CorruptionKind::GaussianBlur];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::GaussianBlur => "gaussian_blur",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Invalid(format!("unknown corruption kind {s:?}")))
    }

    /// Severity parameter for levels 1..=5.
    pub fn parameter(self, severity: u8) -> Result<f64> {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.2],
            CorruptionKind::GaussianBlur => [0.4, 0.6, 0.9, 1.3, 1.8],
        };
        if !(1..=5).contains(&severity) {
            return Err(Error::Invalid(format!("severity {severity} outside 1..=5")));
        }
        Ok(table[severity as usize - 1])
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

/// Corrupts one image `[C, H, W]` (or any tensor whose trailing two axes are
/// `H, W`). Deterministic in `(image, spec)`.
pub fn apply_corruption(image: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    let p = spec.kind.parameter(spec.severity)?;
    if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Invalid("corruption input must lie in [0, 1]".into()));
    }
    let shape = image.shape();
    if shape.len() < 2 {
        return Err(Error::Shape { op: "apply_corruption", detail: format!("{shape:?}") });
    }
    let mut rng = Rng::new(spec.seed);
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let out: Vec<f64> = match spec.kind {
        CorruptionKind::GaussianNoise => image.data().iter().map(|&v| clamp(v + p * rng.normal())).collect(),
        CorruptionKind::ShotNoise => image.data().iter().map(|&v| clamp(rng.poisson(v * p) / p)).collect(),
        CorruptionKind::Brightness => image.data().iter().map(|&v| clamp(v + p)).collect(),
        CorruptionKind::Contrast => {
            let mean = image.sum() / image.len() as f64;
            image.data().iter().map(|&v| clamp((v - mean) * p + mean)).collect()
        }
        CorruptionKind::GaussianBlur => {
            let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let kernel = gaussian_kernel(p);
            image.data().chunks(h * w).flat_map(|plane| blur_plane(plane, h, w, &kernel)).map(clamp).collect()
        }
    };
    Tensor::new(shape.to_vec(), out)
}

/// Normalized 1-D Gaussian taps over `[-⌈3σ⌉, ⌈3σ⌉]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable blur with edge-clamped borders.
fn blur_plane(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(t, kv)| kv * plane[y * w + at(x as isize + t as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(t, kv)| kv * tmp[at(y as isize + t as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Per-sample corruption seed derived from the suite seed and the cell.
pub fn sample_seed(suite_seed: u64, kind: CorruptionKind, severity: u8, index: usize) -> u64 {
    mix_seed(suite_seed, &[kind.index(), severity as u64, index as u64])
}

/// Corrupts every image of `x: [N, ...]`. Severity 0 is the identity.
pub fn corrupt_batch(x: &Tensor, kind: CorruptionKind, severity: u8, suite_seed: u64) -> Result<Tensor> {
    if severity == 0 {
        return Ok(x.clone());
    }
    let n = x.shape()[0];
    let per = x.len() / n;
    let img_shape = x.shape()[1..].to_vec();
    let mut data = Vec::with_capacity(x.len());
    for (i, img) in x.data().chunks(per).enumerate() {
        let t = Tensor::new(img_shape.clone(), img.to_vec())?;
        let spec = CorruptionSpec { kind, severity, seed: sample_seed(suite_seed, kind, severity, i) };
        data.extend(apply_corruption(&t, &spec)?.into_data());
    }
    Tensor::new(x.shape().to_vec(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSuiteResult {
    pub kinds: Vec<CorruptionKind>,
    /// `accuracy[kind][severity - 1]`
    pub accuracy: Vec<Vec<f64>>,
    pub grand_mean: f64,
    pub clean_accuracy: f64,
}

impl CorruptionSuiteResult {
    pub fn kind_mean(&self, k: usize) -> f64 {
        self.accuracy[k].iter().sum::<f64>() / self.accuracy[k].len() as f64
    }

    /// Grand mean divided by clean accuracy.
    pub fn normalized_accuracy(&self) -> Result<f64> {
        normalized_accuracy(self)
    }
}

/// Accuracy on one cell; severity 0 evaluates the clean set.
pub fn cell_accuracy(net: &Network, x: &Tensor, y: &[usize], kind: CorruptionKind, severity: u8, suite_seed: u64) -> Result<f64> {
    net.accuracy(&corrupt_batch(x, kind, severity, suite_seed)?, y)
}

/// Accuracy for every (kind, severity) cell plus clean accuracy.
pub fn corruption_suite_eval(net: &Network, x: &Tensor, y: &[usize], suite_seed: u64) -> Result<CorruptionSuiteResult> {
    if y.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let clean_accuracy = net.accuracy(x, y)?;
    let kinds = CorruptionKind::ALL.to_vec();
    let accuracy = kinds
        .iter()
        .map(|&k| (1..=5).map(|s| cell_accuracy(net, x, y, k, s, suite_seed)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<f64> = accuracy.iter().flatten().copied().collect();
    let grand_mean = cells.iter().sum::<f64>() / cells.len() as f64;
    Ok(CorruptionSuiteResult { kinds, accuracy, grand_mean, clean_accuracy })
}

pub fn normalized_accuracy(suite: &CorruptionSuiteResult) -> Result<f64> {
    if suite.clean_accuracy <= 0.0 {
        return Err(Error::Invalid("clean accuracy is zero; normalized corrupted accuracy is undefined (floor effect)".into()));
    }
    Ok(suite.grand_mean / suite.clean_accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: f64, n: usize) -> Tensor {
        Tensor::full(&[1, n, n], v)
    }

    #[test]
    fn brightness_shift() {
        let out = apply_corruption(&gray(0.5, 8), &CorruptionSpec { kind: CorruptionKind::Brightness, severity: 2, seed: 0 }).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let out = apply_corruption(&gray(0.9, 8), &CorruptionSpec { kind: CorruptionKind::Brightness, severity: 5, seed: 0 }).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn contrast_fixes_constant_images() {
        let img = gray(0.3, 8);
        for s in 1..=5 {
            let out = apply_corruption(&img, &CorruptionSpec { kind: CorruptionKind::Contrast, severity: s, seed: 0 }).unwrap();
            assert!(out.max_abs_diff(&img) < 1e-15);
        }
    }

    #[test]
    fn blur_preserves_constants_and_kernel_sums_to_one() {
        for s in [0.4, 1.8] {
            assert!((gaussian_kernel(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(gaussian_kernel(0.4).len(), 2 * 2 + 1);
        assert_eq!(gaussian_kernel(1.8).len(), 2 * 6 + 1);
        let img = gray(0.6, 6);
        let out = apply_corruption(&img, &CorruptionSpec { kind: CorruptionKind::GaussianBlur, severity: 5, seed: 0 }).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn invalid_severity() {
        for s in [0u8, 6] {
            assert!(apply_corruption(&gray(0.5, 4), &CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: s, seed: 0 }).is_err());
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let mut rng = Rng::new(3);
        let mut img = Tensor::zeros(&[1, 16, 16]);
        img.data_mut().iter_mut().for_each(|v| *v = rng.uniform());
        for kind in CorruptionKind::ALL {
            for s in 1..=5 {
                let spec = CorruptionSpec { kind, severity: s, seed: 11 };
                let a = apply_corruption(&img, &spec).unwrap();
                let b = apply_corruption(&img, &spec).unwrap();
                assert_eq!(a, b);
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in CorruptionKind::ALL {
            assert_eq!(CorruptionKind::parse(k.name()).unwrap(), k);
        }
        assert!(CorruptionKind::parse("fog").is_err());
    }

    #[test]
    fn normalized_accuracy_guard() {
        let mut r = CorruptionSuiteResult { kinds: vec![], accuracy: vec![], grand_mean: 0.25, clean_accuracy: 0.5 };
        assert_eq!(normalized_accuracy(&r).unwrap(), 0.5);
        r.grand_mean = 0.5;
        assert_eq!(normalized_accuracy(&r).unwrap(), 1.0);
        r.clean_accuracy = 0.0;
        assert!(normalized_accuracy(&r).is_err());
    }
}
