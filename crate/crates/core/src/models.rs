//! Compact convolutional classifiers with an activation tap at every ReLU.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::stns;
use crate::tape::{BatchStats, PoolKind, Tape, Var};
use crate::tensor::Tensor;

/// Running-statistics momentum: `running <- 0.9 * running + 0.1 * batch`.
pub const BN_RUNNING_MOMENTUM: f64 = 0.9;

/// Samples per tape when evaluating large sets.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    None,
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub batchnorm: bool,
    pub pool: Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub blocks: Vec<ConvBlock>,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl NetworkSpec {
    /// Three 3×3 conv blocks (16/32/64 channels, batchnorm, 2×2 average
    /// pooling), one hidden ReLU layer of 64 units, then logits.
    pub fn micronet(channels: usize, size: usize, classes: usize) -> Self {
        let block = |c| ConvBlock { channels: c, kernel: 3, stride: 1, batchnorm: true, pool: Pool::Avg };
        NetworkSpec { input: [channels, size, size], blocks: vec![block(16), block(32), block(64)], hidden: vec![64], classes }
    }

    pub fn tap_names(&self) -> Vec<String> {
        let conv = (0..self.blocks.len()).map(|i| format!("conv{}", i + 1));
        let fc = (0..self.hidden.len()).map(|i| format!("fc{}", i + 1));
        conv.chain(fc).collect()
    }

    pub fn tap_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.channels).chain(self.hidden.iter().copied()).collect()
    }

    /// Spatial extent after each conv block (post-pool), checking consistency.
    pub fn spatial_dims(&self) -> Result<Vec<(usize, usize)>> {
        if self.classes < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        let [c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Invalid(format!("input shape {:?}", self.input)));
        }
        let mut dims = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::Invalid(format!("block {i}: zero channels, kernel or stride")));
            }
            let pad = b.kernel / 2;
            if h + 2 * pad < b.kernel || w + 2 * pad < b.kernel {
                return Err(Error::Invalid(format!("block {i}: kernel {} exceeds input {h}x{w}", b.kernel)));
            }
            h = (h + 2 * pad - b.kernel) / b.stride + 1;
            w = (w + 2 * pad - b.kernel) / b.stride + 1;
            if b.pool != Pool::None {
                if h < 2 || w < 2 {
                    return Err(Error::Invalid(format!("block {i}: {h}x{w} map too small to pool")));
                }
                h /= 2;
                w /= 2;
            }
            dims.push((h, w));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Invalid("zero-width hidden layer".into()));
        }
        Ok(dims)
    }

    pub fn flat_features(&self) -> Result<usize> {
        let dims = self.spatial_dims()?;
        Ok(match (self.blocks.last(), dims.last()) {
            (Some(b), Some(&(h, w))) => b.channels * h * w,
            _ => self.input.iter().product(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnSlots {
    gamma: usize,
    beta: usize,
    /// Index into `Network::buffers` of the running mean; variance follows.
    running: usize,
}

#[derive(Debug, Clone)]
enum Layer {
    Conv { w: usize, b: Option<usize>, stride: usize, pad: usize, bn: Option<BnSlots>, pool: Pool },
    Dense { w: usize, b: usize, relu: bool },
}

/// A feed-forward classifier built from a [`NetworkSpec`].
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    buffers: Vec<Tensor>,
    buffer_names: Vec<String>,
}

/// Handles produced by one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// One `[N × U]` unit-activation matrix per ReLU, in depth order.
    pub taps: Vec<Var>,
    pub params: Vec<Var>,
    pub bn_stats: Vec<BatchStats>,
}

/// Filter-map-averaged post-ReLU activations, one `[samples × units]`
/// matrix per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitActivations {
    pub taps: Vec<String>,
    pub layers: Vec<Tensor>,
}

impl UnitActivations {
    pub fn samples(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[0])
    }

    pub fn concat(parts: &[UnitActivations]) -> Result<UnitActivations> {
        let first = parts.first().ok_or(Error::Empty("activations"))?;
        let layers = (0..first.layers.len())
            .map(|l| Tensor::concat_rows(&parts.iter().map(|p| p.layers[l].clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Ok(UnitActivations { taps: first.taps.clone(), layers })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeadUnits {
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
    /// `mask[layer][unit]` is true for dead units.
    pub mask: Vec<Vec<bool>>,
}

impl DeadUnits {
    pub fn total_proportion(&self) -> f64 {
        let units: usize = self.mask.iter().map(Vec::len).sum();
        self.counts.iter().sum::<usize>() as f64 / units as f64
    }
}

/// A unit is dead when its maximum activation over all samples is at most
/// `threshold`.
pub fn dead_units(acts: &UnitActivations, threshold: f64) -> Result<DeadUnits> {
    if acts.layers.is_empty() {
        return Err(Error::Empty("activation matrix"));
    }
    let mut counts = Vec::new();
    let mut proportions = Vec::new();
    let mut mask = Vec::new();
    for m in &acts.layers {
        let (n, u) = (m.shape()[0], m.shape()[1]);
        let d = m.data();
        let layer_mask: Vec<bool> = (0..u).map(|j| (0..n).map(|i| d[i * u + j]).fold(f64::NEG_INFINITY, f64::max) <= threshold).collect();
        let c = layer_mask.iter().filter(|&&b| b).count();
        counts.push(c);
        proportions.push(c as f64 / u as f64);
        mask.push(layer_mask);
    }
    Ok(DeadUnits { counts, proportions, mask })
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.normal() * std);
    t.with_grad()
}

impl Network {
    /// Builds and He-initializes a network; biases and batchnorm shifts
    /// start at zero, batchnorm scales at one.
    pub fn build(spec: &NetworkSpec, rng: &mut Rng) -> Result<Network> {
        spec.spatial_dims()?;
        let mut net = Network {
            spec: spec.clone(),
            layers: Vec::new(),
            params: Vec::new(),
            param_names: Vec::new(),
            buffers: Vec::new(),
            buffer_names: Vec::new(),
        };
        let mut cin = spec.input[0];
        for (i, b) in spec.blocks.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let fan_in = cin * b.kernel * b.kernel;
            let w = net.add_param(&format!("{name}.weight"), he_normal(&[b.channels, cin, b.kernel, b.kernel], fan_in, rng));
            let (bias, bn) = if b.batchnorm {
                let gamma = net.add_param(&format!("{name}.bn.gamma"), Tensor::full(&[b.channels], 1.0).with_grad());
                let beta = net.add_param(&format!("{name}.bn.beta"), Tensor::zeros(&[b.channels]).with_grad());
                let running = net.buffers.len();
                net.buffers.push(Tensor::zeros(&[b.channels]));
                net.buffer_names.push(format!("{name}.bn.running_mean"));
                net.buffers.push(Tensor::full(&[b.channels], 1.0));
                net.buffer_names.push(format!("{name}.bn.running_var"));
                (None, Some(BnSlots { gamma, beta, running }))
            } else {
                (Some(net.add_param(&format!("{name}.bias"), Tensor::zeros(&[b.channels]).with_grad())), None)
            };
            net.layers.push(Layer::Conv { w, b: bias, stride: b.stride, pad: b.kernel / 2, bn, pool: b.pool });
            cin = b.channels;
        }
        let mut fan_in = spec.flat_features()?;
        let widths: Vec<(usize, bool)> = spec.hidden.iter().map(|&h| (h, true)).chain(std::iter::once((spec.classes, false))).collect();
        for (j, (width, relu)) in widths.into_iter().enumerate() {
            let name = if relu { format!("fc{}", j + 1) } else { "logits".to_string() };
            let w = net.add_param(&format!("{name}.weight"), he_normal(&[fan_in, width], fan_in, rng));
            let b = net.add_param(&format!("{name}.bias"), Tensor::zeros(&[width]).with_grad());
            net.layers.push(Layer::Dense { w, b, relu });
            fan_in = width;
        }
        Ok(net)
    }

    fn add_param(&mut self, name: &str, t: Tensor) -> usize {
        self.params.push(t);
        self.param_names.push(name.to_string());
        self.params.len() - 1
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.spec.tap_names()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Records a forward pass of `x: [N, C, H, W]`.
    ///
    /// With `param_grads` the parameters are gradient-tracked leaves, so a
    /// later backward pass can be harvested with [`Network::accumulate_grads`].
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, param_grads: bool) -> Result<ForwardPass> {
        let [c, h, w] = self.spec.input;
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::Shape { op: "forward", detail: format!("input {xs:?}, network expects [N, {c}, {h}, {w}]") });
        }
        let n = xs[0];
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone(), param_grads)).collect();
        let mut taps = Vec::new();
        let mut bn_stats = Vec::new();
        let mut cur = x;
        let mut flattened = false;
        for layer in &self.layers {
            match layer {
                Layer::Conv { w, b, stride, pad, bn, pool } => {
                    let mut y = tape.conv2d(cur, params[*w], b.map(|i| params[i]), *stride, *pad)?;
                    if let Some(slots) = bn {
                        y = match mode {
                            Mode::Train => {
                                let (out, stats) = tape.batchnorm_train(y, params[slots.gamma], params[slots.beta])?;
                                bn_stats.push(stats);
                                out
                            }
                            Mode::Eval => tape.batchnorm_eval(
                                y,
                                params[slots.gamma],
                                params[slots.beta],
                                self.buffers[slots.running].data(),
                                self.buffers[slots.running + 1].data(),
                            )?,
                        };
                    }
                    y = tape.relu(y)?;
                    taps.push(tape.spatial_mean(y)?);
                    cur = match pool {
                        Pool::None => y,
                        Pool::Avg => tape.pool2d(y, 2, PoolKind::Avg)?,
                        Pool::Max => tape.pool2d(y, 2, PoolKind::Max)?,
                    };
                }
                Layer::Dense { w, b, relu } => {
                    if !flattened {
                        let feat = tape.value(cur).len() / n;
                        cur = tape.reshape(cur, &[n, feat])?;
                        flattened = true;
                    }
                    let z = tape.matmul(cur, params[*w])?;
                    let mut y = tape.add(z, params[*b])?;
                    if *relu {
                        y = tape.relu(y)?;
                        taps.push(y);
                    }
                    cur = y;
                }
            }
        }
        Ok(ForwardPass { logits: cur, taps, params, bn_stats })
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let slots: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { bn: Some(s), .. } => Some(s.running),
                _ => None,
            })
            .collect();
        for (slot, st) in slots.into_iter().zip(stats) {
            let m = BN_RUNNING_MOMENTUM;
            for (r, b) in self.buffers[slot].data_mut().iter_mut().zip(&st.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.buffers[slot + 1].data_mut().iter_mut().zip(&st.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Adds the tape gradients of this pass's parameter leaves into each
    /// parameter's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, pass: &ForwardPass) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(&pass.params) {
            match tape.grad(*v) {
                Some(g) => p.accumulate_grad(g)?,
                None => p.accumulate_grad(&vec![0.0; p.len()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Evaluation-mode logits and unit activations for a whole batch.
    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<(Tensor, UnitActivations)> {
        let n = batch.shape()[0];
        let mut logits = Vec::new();
        let mut acts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let chunk = if start == 0 && end == n { batch.clone() } else { batch.slice_rows(start, end)? };
            let mut tape = Tape::new();
            let x = tape.leaf(chunk, false);
            let pass = self.forward(&mut tape, x, Mode::Eval, false)?;
            logits.push(tape.value(pass.logits).clone());
            acts.push(UnitActivations { taps: self.tap_names(), layers: pass.taps.iter().map(|v| tape.value(*v).clone()).collect() });
            start = end;
        }
        Ok((Tensor::concat_rows(&logits)?, UnitActivations::concat(&acts)?))
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_taps(batch)?.0)
    }

    pub fn accuracy(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(batch)?;
        Ok(accuracy(&logits, labels))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let entry = |name: &String, t: &Tensor| CheckpointEntry { name: name.clone(), file: format!("{name}.stns"), shape: t.shape().to_vec() };
        let manifest = CheckpointManifest {
            spec: self.spec.clone(),
            taps: self.tap_names(),
            params: self.param_names.iter().zip(&self.params).map(|(n, t)| entry(n, t)).collect(),
            buffers: self.buffer_names.iter().zip(&self.buffers).map(|(n, t)| entry(n, t)).collect(),
        };
        for (e, t) in manifest.params.iter().zip(&self.params).chain(manifest.buffers.iter().zip(&self.buffers)) {
            stns::save(dir.join(&e.file), t)?;
        }
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Network> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let mut net = Network::build(&manifest.spec, &mut Rng::new(0))?;
        if manifest.params.len() != net.params.len() || manifest.buffers.len() != net.buffers.len() {
            return Err(Error::Format("checkpoint does not match its network spec".into()));
        }
        if manifest.taps != net.tap_names() {
            return Err(Error::Format("checkpoint tap names do not match its network spec".into()));
        }
        for (e, slot) in manifest.params.iter().zip(net.params.iter_mut()).chain(manifest.buffers.iter().zip(net.buffers.iter_mut())) {
            let t = stns::load(dir.join(&e.file))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("{}: shape {:?}, expected {:?}", e.name, t.shape(), slot.shape())));
            }
            let rg = slot.requires_grad;
            *slot = t;
            slot.requires_grad = rg;
        }
        Ok(net)
    }

    /// Copies parameter and buffer values from `other` (same spec).
    pub fn copy_state_from(&mut self, other: &Network) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.data_mut().copy_from_slice(b.data());
        }
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            a.data_mut().copy_from_slice(b.data());
        }
    }
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    spec: NetworkSpec,
    taps: Vec<String>,
    params: Vec<CheckpointEntry>,
    buffers: Vec<CheckpointEntry>,
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0)
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Per-sample softmax cross-entropy.
pub fn per_sample_cross_entropy(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &l)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[l]
        })
        .collect()
}
