use selrob_core::corruptions::{apply_corruption, corrupt_batch, gaussian_kernel, normalized_accuracy, CorruptionKind, CorruptionSpec, CorruptionSuiteResult};
use selrob_core::rng::Rng;
use selrob_core::Tensor;

fn image(rng: &mut Rng, n: usize) -> Tensor {
    Tensor::new(vec![1, n, n], (0..n * n).map(|_| 0.2 + 0.6 * rng.uniform()).collect()).unwrap()
}

#[test]
fn deterministic_and_in_range() {
    let mut rng = Rng::new(1);
    let img = image(&mut rng, 16);
    for kind in CorruptionKind::ALL {
        for severity in 1..=5 {
            let spec = CorruptionSpec { kind, severity, seed: 99 };
            let a = apply_corruption(&img, &spec).unwrap();
            assert_eq!(a, apply_corruption(&img, &spec).unwrap());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    assert!(apply_corruption(&img, &CorruptionSpec { kind: CorruptionKind::Brightness, severity: 6, seed: 0 }).is_err());
    assert!(apply_corruption(&img.map(|v| v + 1.0), &CorruptionSpec { kind: CorruptionKind::Brightness, severity: 1, seed: 0 }).is_err());
}

#[test]
fn gaussian_noise_std_within_five_percent() {
    // mid-grey so clamping at 0.26 std is negligible
    let n = 200;
    let img = Tensor::full(&[1, n, n], 0.5);
    for severity in 1..=4 {
        let sigma = CorruptionKind::GaussianNoise.parameter(severity).unwrap();
        let out = apply_corruption(&img, &CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity, seed: 3 }).unwrap();
        let d: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd - sigma).abs() < 0.05 * sigma, "severity {severity}: {sd} vs {sigma}");
    }
}

fn mean_abs_distortion(img: &Tensor, kind: CorruptionKind, severity: u8, seed: u64) -> f64 {
    let out = apply_corruption(img, &CorruptionSpec { kind, severity, seed }).unwrap();
    out.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.len() as f64
}

#[test]
fn noise_distortion_strictly_increases_with_severity() {
    // 1024 pixels, averaged over a few seeds
    let mut rng = Rng::new(5);
    let img = image(&mut rng, 32);
    for kind in [CorruptionKind::GaussianNoise, CorruptionKind::ShotNoise] {
        let curve: Vec<f64> = (1..=5).map(|s| (0..4).map(|seed| mean_abs_distortion(&img, kind, s, seed)).sum::<f64>() / 4.0).collect();
        for w in curve.windows(2) {
            assert!(w[1] > w[0] * 1.05, "{}: {curve:?}", kind.name());
        }
    }
}

#[test]
fn deterministic_kinds_never_decrease_with_severity() {
    let mut rng = Rng::new(6);
    let img = image(&mut rng, 32);
    for kind in [CorruptionKind::Brightness, CorruptionKind::Contrast, CorruptionKind::GaussianBlur] {
        let curve: Vec<f64> = (1..=5).map(|s| mean_abs_distortion(&img, kind, s, 0)).collect();
        assert!(curve[0] > 0.0);
        for w in curve.windows(2) {
            assert!(w[1] >= w[0], "{}: {curve:?}", kind.name());
        }
    }
}

#[test]
fn simple_kinds_match_closed_forms() {
    let img = Tensor::new(vec![1, 2, 2], vec![0.1, 0.3, 0.5, 0.9]).unwrap();
    let b = apply_corruption(&img, &CorruptionSpec { kind: CorruptionKind::Brightness, severity: 2, seed: 0 }).unwrap();
    let want = [0.3, 0.5, 0.7, 1.0];
    for (a, w) in b.data().iter().zip(want) {
        assert!((a - w).abs() < 1e-15);
    }
    let c = apply_corruption(&img, &CorruptionSpec { kind: CorruptionKind::Contrast, severity: 5, seed: 0 }).unwrap();
    let mean = 0.45;
    for (a, v) in c.data().iter().zip(img.data()) {
        assert!((a - ((v - mean) * 0.2 + mean)).abs() < 1e-15);
    }
    let flat = Tensor::full(&[1, 5, 5], 0.4);
    let blurred = apply_corruption(&flat, &CorruptionSpec { kind: CorruptionKind::GaussianBlur, severity: 5, seed: 0 }).unwrap();
    assert!(blurred.max_abs_diff(&flat) < 1e-14);
}

#[test]
fn blur_kernel_is_normalized_with_three_sigma_radius() {
    for sigma in [0.4, 0.6, 0.9, 1.3, 1.8] {
        let k = gaussian_kernel(sigma);
        assert_eq!(k.len(), 2 * (3.0 * sigma as f64).ceil() as usize + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for i in 0..k.len() / 2 {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }
}

#[test]
fn batch_seeds_are_per_sample() {
    let img = Tensor::full(&[3, 1, 4, 4], 0.5);
    let a = corrupt_batch(&img, CorruptionKind::GaussianNoise, 3, 7).unwrap();
    assert_eq!(a, corrupt_batch(&img, CorruptionKind::GaussianNoise, 3, 7).unwrap());
    assert_ne!(a.data()[..16], a.data()[16..32]);
    assert_ne!(a, corrupt_batch(&img, CorruptionKind::GaussianNoise, 3, 8).unwrap());
    assert_eq!(corrupt_batch(&img, CorruptionKind::Contrast, 0, 7).unwrap(), img);
}

#[test]
fn normalized_accuracy_guards_zero_clean() {
    let mut s = CorruptionSuiteResult { kinds: vec![CorruptionKind::Brightness], accuracy: vec![vec![0.25; 5]], grand_mean: 0.25, clean_accuracy: 0.5 };
    assert_eq!(normalized_accuracy(&s).unwrap(), 0.5);
    s.grand_mean = 0.5;
    assert_eq!(normalized_accuracy(&s).unwrap(), 1.0);
    s.clean_accuracy = 0.0;
    assert!(normalized_accuracy(&s).is_err());
}
