use selrob_core::error::Error;
use selrob_core::gradcheck::finite_difference_check;
use selrob_core::models::{Mode, Network, NetworkSpec};
use selrob_core::rng::Rng;
use selrob_core::selectivity::regularized_loss;
use selrob_core::tape::{PoolKind, Tape, Var};
use selrob_core::{Result, Tensor};

const OP_TOL: f64 = 1e-6;
const E2E_TOL: f64 = 1e-5;
const STEP: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Random values bounded away from zero, so ReLU kinks are not straddled.
fn off_kink(shape: &[usize], rng: &mut Rng) -> Tensor {
    random(shape, rng).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element matters.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let m = t.value(y).len();
    let mut rng = Rng::new(seed);
    let r = t.leaf(random(&[m, 1], &mut rng), false);
    let flat = t.reshape(y, &[1, m])?;
    let p = t.matmul(flat, r)?;
    t.sum(p)
}

fn check<F>(name: &str, f: F, x: &Tensor, tol: f64)
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let r = finite_difference_check(f, x, STEP, tol).unwrap();
    assert!(r.passed, "{name}: max relative error {:e} (abs {:e})", r.max_rel_error, r.max_abs_error);
}

/// Direct nested-loop convolution with zero padding.
fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for c in 0..cin {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let (y, xx) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.data()[((s * cin + c) * h + y as usize) * wd + xx as usize] * w.data()[((o * cin + c) * kh + di) * kw + dj];
                                }
                            }
                        }
                    }
                    out[((s * cout + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

#[test]
fn conv_forward_matches_direct_loops() {
    let mut rng = Rng::new(1);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = random(&[2, 3, 7, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.leaf(x.clone(), false), t.leaf(w.clone(), false), t.leaf(b.clone(), false));
        let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = conv_oracle(&x, &w, Some(b.data()), stride, pad);
        assert_eq!(t.shape(y), want.shape());
        assert!(t.value(y).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn elementary_gradients() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![4], vec![-1.0, 0.0, 2.0, 3.0]).unwrap(), true);
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0, 3.0]);
    let s = t.sum(r).unwrap();
    t.backward(s).unwrap();
    // subgradient 0 at the kink
    assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.leaf(random(&[3, 2], &mut Rng::new(2)), true);
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn reused_nodes_accumulate() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    let y = t.add(x, x).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    // a second backward adds into the leaf
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0, 4.0, 4.0]);
    t.zero_grad();
    assert!(t.grad(x).map_or(true, |g| g.iter().all(|v| *v == 0.0)));
}

#[test]
fn uniform_logits_give_log_classes() {
    for c in [2usize, 5, 10] {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::full(&[7, c], 0.3), true);
        let labels: Vec<usize> = (0..7).map(|i| i % c).collect();
        let ce = t.softmax_cross_entropy(l, &labels).unwrap();
        assert!((t.value(ce).item() - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn error_paths() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2, 3]), true);
    let y = t.relu(x).unwrap();
    assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(_))));
    let s = t.sum(y).unwrap();
    t.release();
    assert!(matches!(t.backward(s), Err(Error::GraphFreed)));

    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2, 3]), false);
    let b = t.leaf(Tensor::zeros(&[2, 3]), false);
    assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
    assert!(matches!(t.softmax_cross_entropy(a, &[0, 3]), Err(_)));
    assert!(t.class_selectivity(a, &[1, 1], 1e-6).is_err());
}

#[test]
fn per_op_finite_differences() {
    let mut rng = Rng::new(3);
    for trial in 0..3u64 {
        let (n, cin, h) = (2, 1 + trial as usize, 4 + trial as usize);
        let x = off_kink(&[n, cin, h, h + 1], &mut rng);
        let w = random(&[3, cin, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let wc = w.clone();
        let bc = b.clone();
        check("conv2d/x", |t, v| {
            let (wv, bv) = (t.leaf(wc.clone(), false), t.leaf(bc.clone(), false));
            let y = t.conv2d(v, wv, Some(bv), 1, 1)?;
            project(t, y, trial)
        }, &x, OP_TOL);
        let xc = x.clone();
        check("conv2d/w", |t, v| {
            let xv = t.leaf(xc.clone(), false);
            let y = t.conv2d(xv, v, None, 2, 1)?;
            project(t, y, trial)
        }, &w, OP_TOL);
        let (xc, wc) = (x.clone(), w.clone());
        check("conv2d/bias", |t, v| {
            let (xv, wv) = (t.leaf(xc.clone(), false), t.leaf(wc.clone(), false));
            let y = t.conv2d(xv, wv, Some(v), 1, 0)?;
            project(t, y, trial)
        }, &b, OP_TOL);

        let a = random(&[3, 4], &mut rng);
        let m = random(&[4, 2], &mut rng);
        let mc = m.clone();
        check("matmul/a", |t, v| {
            let mv = t.leaf(mc.clone(), false);
            let y = t.matmul(v, mv)?;
            project(t, y, trial)
        }, &a, OP_TOL);
        let ac = a.clone();
        check("matmul/b", |t, v| {
            let av = t.leaf(ac.clone(), false);
            let y = t.matmul(av, v)?;
            project(t, y, trial)
        }, &m, OP_TOL);

        let bias = random(&[4], &mut rng);
        let ac = a.clone();
        check("add/broadcast", |t, v| {
            let av = t.leaf(ac.clone(), false);
            let y = t.add(av, v)?;
            project(t, y, trial)
        }, &bias, OP_TOL);
        check("relu", |t, v| {
            let y = t.relu(v)?;
            project(t, y, trial)
        }, &x, OP_TOL);

        let g = random(&[cin], &mut rng).map(|v| 1.0 + 0.3 * v);
        let be = random(&[cin], &mut rng);
        let (gc, bec) = (g.clone(), be.clone());
        check("batchnorm_train/x", |t, v| {
            let (gv, bv) = (t.leaf(gc.clone(), false), t.leaf(bec.clone(), false));
            let (y, _) = t.batchnorm_train(v, gv, bv)?;
            project(t, y, trial)
        }, &x, OP_TOL);
        let (xc, bec) = (x.clone(), be.clone());
        check("batchnorm_train/gamma", |t, v| {
            let (xv, bv) = (t.leaf(xc.clone(), false), t.leaf(bec.clone(), false));
            let (y, _) = t.batchnorm_train(xv, v, bv)?;
            project(t, y, trial)
        }, &g, OP_TOL);
        let (xc, gc) = (x.clone(), g.clone());
        check("batchnorm_train/beta", |t, v| {
            let (xv, gv) = (t.leaf(xc.clone(), false), t.leaf(gc.clone(), false));
            let (y, _) = t.batchnorm_train(xv, gv, v)?;
            project(t, y, trial)
        }, &be, OP_TOL);
        let rm: Vec<f64> = (0..cin).map(|i| 0.1 * i as f64).collect();
        let rv: Vec<f64> = (0..cin).map(|i| 0.5 + i as f64).collect();
        let (gc, bec) = (g.clone(), be.clone());
        check("batchnorm_eval/x", |t, v| {
            let (gv, bv) = (t.leaf(gc.clone(), false), t.leaf(bec.clone(), false));
            let y = t.batchnorm_eval(v, gv, bv, &rm, &rv)?;
            project(t, y, trial)
        }, &x, OP_TOL);

        let px = random(&[2, cin, 4, 6], &mut rng);
        for kind in [PoolKind::Avg, PoolKind::Max] {
            check("pool2d", |t, v| {
                let y = t.pool2d(v, 2, kind)?;
                project(t, y, trial)
            }, &px, OP_TOL);
        }
        check("spatial_mean", |t, v| {
            let y = t.spatial_mean(v)?;
            project(t, y, trial)
        }, &px, OP_TOL);
        check("reshape+scalar_mul", |t, v| {
            let r = t.reshape(v, &[2, px.len() / 2])?;
            let y = t.scalar_mul(r, -1.7)?;
            project(t, y, trial)
        }, &px, OP_TOL);
        check("mean", |t, v| {
            let y = t.relu(v)?;
            t.mean(y)
        }, &x, OP_TOL);

        let logits = random(&[6, 4], &mut rng);
        let labels = [0, 3, 1, 1, 2, 0];
        check("softmax_cross_entropy", |t, v| t.softmax_cross_entropy(v, &labels), &logits, OP_TOL);

        let acts = random(&[8, 5], &mut rng).map(|v| v.abs() + 0.1);
        let sl = [0, 1, 2, 0, 1, 2, 2, 1];
        check("class_selectivity", |t, v| {
            let y = t.class_selectivity(v, &sl, 1e-6)?;
            project(t, y, trial)
        }, &acts, OP_TOL);
    }
}

fn micronet() -> (Network, Tensor, Vec<usize>) {
    let mut rng = Rng::new(11);
    let spec = NetworkSpec::micronet(1, 8, 3);
    let net = Network::build(&spec, &mut rng).unwrap();
    let x = random(&[6, 1, 8, 8], &mut rng).map(|v| 0.5 + 0.2 * v);
    (net, x, vec![0, 1, 2, 0, 1, 2])
}

#[test]
fn end_to_end_loss_gradient_wrt_input() {
    let (net, x, y) = micronet();
    for mode in [Mode::Train, Mode::Eval] {
        for alpha in [0.0, 1.0, -2.0] {
            check("micronet/input", |t, v| {
                let pass = net.forward(t, v, mode, false)?;
                Ok(regularized_loss(t, pass.logits, &y, &pass.taps, alpha)?.loss)
            }, &x, E2E_TOL);
        }
    }
}

#[test]
fn end_to_end_loss_gradient_wrt_parameters() {
    let (net, x, y) = micronet();
    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), false);
    let pass = net.forward(&mut t, xv, Mode::Train, true).unwrap();
    let loss = regularized_loss(&mut t, pass.logits, &y, &pass.taps, 0.5).unwrap().loss;
    t.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = pass.params.iter().map(|p| t.grad(*p).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.value(*p).len()])).collect();

    let eval = |n: &Network| {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), false);
        let pass = n.forward(&mut t, xv, Mode::Train, false).unwrap();
        let l = regularized_loss(&mut t, pass.logits, &y, &pass.taps, 0.5).unwrap().loss;
        t.value(l).item()
    };
    let mut rng = Rng::new(5);
    let mut probe = net.clone();
    for (pi, grad) in analytic.iter().enumerate() {
        // a handful of coordinates per tensor keeps the check fast
        for _ in 0..4 {
            let i = rng.below(grad.len());
            let orig = probe.params()[pi].data()[i];
            probe.params_mut()[pi].data_mut()[i] = orig + STEP;
            let fp = eval(&probe);
            probe.params_mut()[pi].data_mut()[i] = orig - STEP;
            let fm = eval(&probe);
            probe.params_mut()[pi].data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * STEP);
            let rel = (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-3);
            assert!(rel < E2E_TOL, "{}[{i}]: analytic {} numeric {num}", net.param_names()[pi], grad[i]);
        }
    }
}

#[test]
fn regularizer_gradient_wrt_activations() {
    let mut rng = Rng::new(21);
    let a1 = random(&[9, 4], &mut rng).map(|v| v.abs() + 0.05);
    let a2 = random(&[9, 6], &mut rng).map(|v| v.abs() + 0.05);
    let logits = random(&[9, 3], &mut rng);
    let y = [0, 1, 2, 2, 1, 0, 0, 1, 2];
    let a2c = a2.clone();
    let lc = logits.clone();
    check("regularized/acts", |t, v| {
        let b = t.leaf(a2c.clone(), false);
        let l = t.leaf(lc.clone(), false);
        Ok(regularized_loss(t, l, &y, &[v, b], 1.5)?.loss)
    }, &a1, E2E_TOL);
}
