//! l∞ attacks (FGSM, PGD), adversarial training, transfer evaluation and
//! input-gradient sensitivity measures.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{accuracy, per_sample_cross_entropy, Mode, Network, EVAL_CHUNK};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::{self, LabeledSet, TrainOptions, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// l∞ budget in normalized pixel units.
    pub epsilon: f64,
    /// PGD step; ignored by FGSM.
    pub step_size: f64,
    /// PGD iterations; ignored by FGSM.
    pub iterations: usize,
    pub bounds: (f64, f64),
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig { kind: AttackKind::Fgsm, epsilon, step_size: epsilon, iterations: 1, bounds: (0.0, 1.0) }
    }

    pub fn pgd(epsilon: f64, step_size: f64, iterations: usize) -> Self {
        AttackConfig { kind: AttackKind::Pgd, epsilon, step_size, iterations, bounds: (0.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Invalid(format!("attack epsilon {} must be non-negative", self.epsilon)));
        }
        if self.kind == AttackKind::Pgd && !(self.step_size > 0.0) {
            return Err(Error::Invalid(format!("PGD step size {} must be positive", self.step_size)));
        }
        if !(self.bounds.0 < self.bounds.1) {
            return Err(Error::Invalid(format!("pixel bounds {:?}", self.bounds)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub perturbed: Tensor,
    pub clean_accuracy: f64,
    pub perturbed_accuracy: f64,
    pub loss_before: Vec<f64>,
    pub loss_after: Vec<f64>,
    pub config: AttackConfig,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the summed cross-entropy with respect to the input batch.
///
/// In evaluation mode samples are independent and the batch is processed in
/// chunks; in training mode the batch statistics couple samples, so the
/// whole batch goes through one tape.
pub fn input_gradient(net: &Network, x: &Tensor, y: &[usize], mode: Mode) -> Result<Tensor> {
    let n = x.shape()[0];
    if n != y.len() {
        return Err(Error::Shape { op: "input_gradient", detail: format!("{n} samples, {} labels", y.len()) });
    }
    let chunk = if mode == Mode::Eval { EVAL_CHUNK } else { n };
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let xs = if start == 0 && end == n { x.clone() } else { x.slice_rows(start, end)? };
        let mut tape = Tape::new();
        let xv = tape.leaf(xs, true);
        let pass = net.forward(&mut tape, xv, mode, false)?;
        let ce = tape.softmax_cross_entropy(pass.logits, &y[start..end])?;
        let total = tape.scalar_mul(ce, (end - start) as f64)?;
        tape.backward(total)?;
        let g = tape.grad_tensor(xv).ok_or_else(|| Error::NonFinite("input gradient missing".into()))?;
        g.check_finite("input gradient")?;
        parts.push(g);
        start = end;
    }
    Tensor::concat_rows(&parts)
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

fn fgsm_step(x: &Tensor, grad: &Tensor, eps: f64, bounds: (f64, f64)) -> Tensor {
    let data = x.data().iter().zip(grad.data()).map(|(&xv, &g)| clamp(xv + eps * sign(g), bounds.0, bounds.1)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn pgd_step(orig: &Tensor, cur: &Tensor, grad: &Tensor, cfg: &AttackConfig) -> Tensor {
    let (lo, hi) = cfg.bounds;
    let data = orig
        .data()
        .iter()
        .zip(cur.data())
        .zip(grad.data())
        .map(|((&x0, &xt), &g)| {
            let v = xt + cfg.step_size * sign(g);
            let v = v.max(x0 - cfg.epsilon).min(x0 + cfg.epsilon);
            clamp(v, lo, hi)
        })
        .collect();
    Tensor::new(orig.shape().to_vec(), data).expect("same shape")
}

fn check_input(x: &Tensor, bounds: (f64, f64)) -> Result<()> {
    if x.data().iter().any(|&v| !(v >= bounds.0 && v <= bounds.1)) {
        return Err(Error::Invalid(format!("input outside pixel bounds {bounds:?}")));
    }
    Ok(())
}

fn finish(net: &Network, x: &Tensor, y: &[usize], perturbed: Tensor, config: &AttackConfig) -> Result<AttackResult> {
    let clean = net.logits(x)?;
    let adv = net.logits(&perturbed)?;
    Ok(AttackResult {
        clean_accuracy: accuracy(&clean, y),
        perturbed_accuracy: accuracy(&adv, y),
        loss_before: per_sample_cross_entropy(&clean, y),
        loss_after: per_sample_cross_entropy(&adv, y),
        perturbed,
        config: config.clone(),
    })
}

/// `x' = clamp(x + eps * sign(grad_x L))`, evaluation mode.
pub fn fgsm(net: &Network, x: &Tensor, y: &[usize], config: &AttackConfig) -> Result<AttackResult> {
    config.validate()?;
    check_input(x, config.bounds)?;
    let perturbed = if config.epsilon == 0.0 {
        x.clone()
    } else {
        let g = input_gradient(net, x, y, Mode::Eval)?;
        fgsm_step(x, &g, config.epsilon, config.bounds)
    };
    finish(net, x, y, perturbed, config)
}

/// PGD from `x` (no random start), each step projected onto the
/// intersection of the l∞ ball and the pixel bounds.
pub fn pgd(net: &Network, x: &Tensor, y: &[usize], config: &AttackConfig) -> Result<AttackResult> {
    config.validate()?;
    check_input(x, config.bounds)?;
    let perturbed = pgd_in_mode(net, x, y, config, Mode::Eval)?;
    finish(net, x, y, perturbed, config)
}

/// PGD iterate after `config.iterations` steps, with gradients taken in `mode`.
pub fn pgd_in_mode(net: &Network, x: &Tensor, y: &[usize], config: &AttackConfig, mode: Mode) -> Result<Tensor> {
    config.validate()?;
    let mut cur = x.clone();
    for _ in 0..config.iterations {
        let g = input_gradient(net, &cur, y, mode)?;
        cur = pgd_step(x, &cur, &g, config);
    }
    Ok(cur)
}

/// Accuracy and per-sample loss after each PGD step count in `checkpoints`,
/// from a single trajectory of `max(checkpoints)` steps.
pub fn pgd_trajectory(net: &Network, x: &Tensor, y: &[usize], config: &AttackConfig, checkpoints: &[usize]) -> Result<Vec<PgdPoint>> {
    config.validate()?;
    check_input(x, config.bounds)?;
    let max = checkpoints.iter().copied().max().unwrap_or(0);
    let mut out = Vec::new();
    let mut cur = x.clone();
    for step in 0..=max {
        if checkpoints.contains(&step) {
            let logits = net.logits(&cur)?;
            out.push(PgdPoint { steps: step, accuracy: accuracy(&logits, y), losses: per_sample_cross_entropy(&logits, y) });
        }
        if step < max {
            let g = input_gradient(net, &cur, y, Mode::Eval)?;
            cur = pgd_step(x, &cur, &g, config);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PgdPoint {
    pub steps: usize,
    pub accuracy: f64,
    pub losses: Vec<f64>,
}

/// Standard training where every minibatch is first replaced by its PGD
/// perturbation under the current parameters (training-mode statistics).
pub fn pgd_train(net: &mut Network, train: &LabeledSet, val: &LabeledSet, attack: &AttackConfig, opts: &TrainOptions, rng: &mut Rng) -> Result<TrainOutcome> {
    let mut opts = opts.clone();
    opts.adversarial = Some(AttackConfig { kind: AttackKind::Pgd, ..attack.clone() });
    training::train(net, train, val, &opts, rng)
}

/// Accuracy of `target` on adversarial examples crafted against `source`.
pub fn transfer_eval(source: &Network, target: &Network, x: &Tensor, y: &[usize], config: &AttackConfig) -> Result<f64> {
    if source.spec().input != target.spec().input || source.classes() != target.classes() {
        return Err(Error::Shape { op: "transfer_eval", detail: "source and target networks differ in input or class shape".into() });
    }
    let adv = match config.kind {
        AttackKind::Fgsm => fgsm(source, x, y, config)?.perturbed,
        AttackKind::Pgd => pgd(source, x, y, config)?.perturbed,
    };
    target.accuracy(&adv, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianNorm {
    Frobenius,
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub norm: JacobianNorm,
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// Per-sample Jacobians `[outputs × input features]` of a row-independent
/// map `f: [N, ...] -> [N, K]`, one backward pass per output column.
pub fn per_sample_jacobians<F>(mut f: F, x: &Tensor) -> Result<Vec<Tensor>>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let n = x.shape()[0];
    let d = x.len() / n;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let os = tape.shape(out).to_vec();
    if os.len() != 2 || os[0] != n {
        return Err(Error::Shape { op: "jacobian", detail: format!("output {os:?} for {n} samples") });
    }
    let k = os[1];
    let mut jac = vec![vec![0.0; k * d]; n];
    let mut seed = vec![0.0; n * k];
    for i in 0..k {
        seed.iter_mut().enumerate().for_each(|(j, s)| *s = if j % k == i { 1.0 } else { 0.0 });
        tape.zero_grad();
        tape.backward_with_seed(out, &seed)?;
        if let Some(g) = tape.grad(xv) {
            for (s, row) in jac.iter_mut().enumerate() {
                row[i * d..(i + 1) * d].copy_from_slice(&g[s * d..(s + 1) * d]);
            }
        }
    }
    jac.into_iter().map(|j| Tensor::new(vec![k, d], j)).collect()
}

pub fn matrix_norm(j: &Tensor, norm: JacobianNorm) -> f64 {
    match norm {
        JacobianNorm::Frobenius => j.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
        JacobianNorm::Spectral => {
            let (r, c) = (j.shape()[0], j.shape()[1]);
            let m = DMatrix::from_row_slice(r, c, j.data());
            m.singular_values().iter().cloned().fold(0.0, f64::max)
        }
    }
}

/// Norm of the input-to-logit Jacobian of every sample (evaluation mode).
pub fn jacobian_norm(net: &Network, x: &Tensor, norm: JacobianNorm) -> Result<JacobianReport> {
    let n = x.shape()[0];
    let mut per_sample = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let xs = x.slice_rows(start, end)?;
        let jac = per_sample_jacobians(|t, v| Ok(net.forward(t, v, Mode::Eval, false)?.logits), &xs)?;
        for j in &jac {
            j.check_finite("jacobian")?;
            per_sample.push(matrix_norm(j, norm));
        }
        start = end;
    }
    let mean = per_sample.iter().sum::<f64>() / n as f64;
    Ok(JacobianReport { norm, per_sample, mean })
}

/// `l2` norms of per-sample input gradients of every column of a
/// row-independent map `f: [N, ...] -> [N, U]`. Returns `[N × U]`.
pub fn gradient_norms_of<F>(mut f: F, x: &Tensor) -> Result<Tensor>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let n = x.shape()[0];
    let d = x.len() / n;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let os = tape.shape(out).to_vec();
    if os.len() != 2 || os[0] != n {
        return Err(Error::Shape { op: "input_unit_gradient_norms", detail: format!("output {os:?} for {n} samples") });
    }
    let u = os[1];
    let mut norms = vec![0.0; n * u];
    let mut seed = vec![0.0; n * u];
    for j in 0..u {
        seed.iter_mut().enumerate().for_each(|(i, s)| *s = if i % u == j { 1.0 } else { 0.0 });
        tape.zero_grad();
        tape.backward_with_seed(out, &seed)?;
        if let Some(g) = tape.grad(xv) {
            for s in 0..n {
                norms[s * u + j] = g[s * d..(s + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
    }
    let t = Tensor::new(vec![n, u], norms)?;
    t.check_finite("input-unit gradient")?;
    Ok(t)
}

/// `‖∇_x a_u(x_n)‖₂` for every sample `n` and unit `u` of tap `tap`.
pub fn input_unit_gradient_norms(net: &Network, x: &Tensor, tap: usize) -> Result<Tensor> {
    let taps = net.tap_names().len();
    if tap >= taps {
        return Err(Error::Invalid(format!("tap {tap} out of range ({taps} taps)")));
    }
    let n = x.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let xs = x.slice_rows(start, end)?;
        parts.push(gradient_norms_of(|t, v| Ok(net.forward(t, v, Mode::Eval, false)?.taps[tap]), &xs)?);
        start = end;
    }
    Tensor::concat_rows(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(3.0), 1.0);
        assert_eq!(sign(-1e-300), -1.0);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::fgsm(-0.1).validate().is_err());
        assert!(AttackConfig::pgd(0.1, 0.0, 3).validate().is_err());
        assert!(AttackConfig::pgd(0.1, 0.01, 0).validate().is_ok());
    }

    #[test]
    fn identity_jacobian_norm_is_sqrt_d() {
        let x = Tensor::new(vec![2, 5], (0..10).map(|v| v as f64).collect()).unwrap();
        let jac = per_sample_jacobians(|_, v| Ok(v), &x).unwrap();
        for j in &jac {
            assert!((matrix_norm(j, JacobianNorm::Frobenius) - 5f64.sqrt()).abs() < 1e-12);
            assert!((matrix_norm(j, JacobianNorm::Spectral) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_unit_gradient_norm_is_weight_norm() {
        let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 2.0, -1.0, 2.0, 3.0]).unwrap();
        let x = Tensor::new(vec![4, 3], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let norms = gradient_norms_of(
            |t, v| {
                let wv = t.leaf(w.clone(), false);
                t.matmul(v, wv)
            },
            &x,
        )
        .unwrap();
        for row in norms.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!((row[1] - 10f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn dead_unit_has_zero_gradient() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 0.5, 0.1, 2.0, 1.0]).unwrap();
        let norms = gradient_norms_of(
            |t, v| {
                let neg = t.scalar_mul(v, -1.0)?;
                t.relu(neg)
            },
            &x,
        )
        .unwrap();
        assert!(norms.data().iter().all(|&v| v == 0.0));
    }
}
