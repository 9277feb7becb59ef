use selrob_core::models::{Mode, Network, NetworkSpec};
use selrob_core::optim::Sgd;
use selrob_core::rng::Rng;
use selrob_core::training::{clip_grad_norm, train, LabeledSet, LrSchedule, TrainOptions};
use selrob_core::{Tape, Tensor};

fn toy(seed: u64, n: usize) -> LabeledSet {
    let mut rng = Rng::new(seed);
    let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let data = y.iter().flat_map(|&c| (0..64).map(|p| (0.2 + 0.3 * ((p % 8 == c * 2) as u8 as f64) + 0.1 * rng.uniform()).min(1.0)).collect::<Vec<_>>()).collect();
    LabeledSet { x: Tensor::new(vec![n, 1, 8, 8], data).unwrap(), y }
}

fn opts(alpha: f64, epochs: usize) -> TrainOptions {
    TrainOptions { epochs, batch_size: 8, schedule: LrSchedule { initial: 0.05, anneal_epochs: vec![2], factor: 0.1 }, momentum: 0.9, weight_decay: 1e-4, alpha, adversarial: None, clip_norm: None }
}

#[test]
fn zero_alpha_matches_plain_cross_entropy_loop() {
    let (tr, va) = (toy(1, 24), toy(2, 9));
    let spec = NetworkSpec::micronet(1, 8, 3);
    let mut a = Network::build(&spec, &mut Rng::new(5)).unwrap();
    let mut b = a.clone();
    let o = opts(0.0, 3);
    train(&mut a, &tr, &va, &o, &mut Rng::new(9)).unwrap();

    let mut rng = Rng::new(9);
    let mut sgd = Sgd::new(0.05, 0.9, 1e-4).unwrap();
    let mut order: Vec<usize> = (0..tr.len()).collect();
    for epoch in 0..3 {
        sgd.learning_rate = o.schedule.at(epoch);
        rng.shuffle(&mut order);
        for idx in order.chunks(8) {
            let batch = tr.subset(idx).unwrap();
            let mut t = Tape::new();
            let xv = t.leaf(batch.x, false);
            let pass = b.forward(&mut t, xv, Mode::Train, true).unwrap();
            let ce = t.softmax_cross_entropy(pass.logits, &batch.y).unwrap();
            t.backward(ce).unwrap();
            b.accumulate_grads(&t, &pass).unwrap();
            b.update_running_stats(&pass.bn_stats);
            sgd.step(&mut b.params_mut()).unwrap();
        }
    }
    for (p, q) in a.params().iter().zip(b.params()) {
        assert_eq!(p.data(), q.data());
    }
    for (p, q) in a.buffers().iter().zip(b.buffers()) {
        assert_eq!(p.data(), q.data());
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let (tr, va) = (toy(3, 48), toy(4, 12));
    let spec = NetworkSpec::micronet(1, 8, 3);
    let run = || {
        let mut net = Network::build(&spec, &mut Rng::new(1)).unwrap();
        let out = train(&mut net, &tr, &va, &opts(0.5, 4), &mut Rng::new(2)).unwrap();
        (net, out)
    };
    let (n1, o1) = run();
    let (n2, o2) = run();
    assert_eq!(o1.history, o2.history);
    assert_eq!(n1.params(), n2.params());
    assert!(o1.history.last().unwrap().train_cross_entropy < o1.history[0].train_cross_entropy);
    assert_eq!(o1.snapshots.len(), 4);
    let acc: Vec<f64> = o1.history.iter().map(|h| h.val_accuracy).collect();
    let best = acc.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(acc[o1.best_epoch], best);
    assert!(acc[..o1.best_epoch].iter().all(|&a| a < best));
    assert_eq!(o1.best().accuracy(&va.x, &va.y).unwrap(), best);
}

#[test]
fn divergence_is_reported() {
    let (tr, va) = (toy(5, 24), toy(6, 6));
    let mut net = Network::build(&NetworkSpec::micronet(1, 8, 3), &mut Rng::new(1)).unwrap();
    let mut o = opts(0.0, 3);
    o.schedule.initial = 1e12;
    let err = train(&mut net, &tr, &va, &o, &mut Rng::new(1)).unwrap_err();
    assert!(matches!(err, selrob_core::Error::NonFinite(_)), "{err}");
}

#[test]
fn invalid_options_rejected() {
    let (tr, va) = (toy(5, 6), toy(6, 3));
    let mut net = Network::build(&NetworkSpec::micronet(1, 8, 3), &mut Rng::new(1)).unwrap();
    let mut o = opts(0.0, 1);
    o.schedule.factor = 0.0;
    assert!(train(&mut net, &tr, &va, &o, &mut Rng::new(1)).is_err());
    let mut o = opts(0.0, 1);
    o.batch_size = 0;
    assert!(train(&mut net, &tr, &va, &o, &mut Rng::new(1)).is_err());
}

#[test]
fn clipping_rescales_jointly() {
    let mut a = Tensor::from_vec(vec![3.0, 0.0]);
    let mut b = Tensor::from_vec(vec![4.0]);
    a.grad = Some(vec![3.0, 0.0]);
    b.grad = Some(vec![4.0]);
    assert!(!clip_grad_norm(&mut [&mut a, &mut b], 5.0).unwrap());
    assert_eq!(b.grad.as_deref(), Some(&[4.0][..]));
    assert!(clip_grad_norm(&mut [&mut a, &mut b], 1.0).unwrap());
    assert!((a.grad.as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
    assert!((b.grad.as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
    b.grad = Some(vec![f64::INFINITY]);
    assert!(clip_grad_norm(&mut [&mut b], 1.0).is_err());

    // a ceiling above every batch norm leaves training untouched
    let (tr, va) = (toy(7, 24), toy(8, 6));
    let spec = NetworkSpec::micronet(1, 8, 3);
    let mut n1 = Network::build(&spec, &mut Rng::new(3)).unwrap();
    let mut n2 = n1.clone();
    let plain = train(&mut n1, &tr, &va, &opts(1.0, 2), &mut Rng::new(4)).unwrap();
    let mut o = opts(1.0, 2);
    o.clip_norm = Some(1e12);
    let loose = train(&mut n2, &tr, &va, &o, &mut Rng::new(4)).unwrap();
    assert_eq!(plain.history, loose.history);
    assert_eq!(n1.params(), n2.params());
    o.clip_norm = Some(-1.0);
    assert!(train(&mut n2, &tr, &va, &o, &mut Rng::new(4)).is_err());
}
