use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::snapshot::{load_params, save_params};
use super::*;

const IMG: GridDims = GridDims::new(64, 48);

fn random_images<T: Real>(rng: &mut ChaCha8Rng, n: usize, dims: GridDims) -> Tensor<T> {
    Tensor::from_vec(
        n,
        1,
        dims.height,
        dims.width,
        (0..n * dims.len()).map(|_| T::real_from_f64(rng.random::<f64>())).collect(),
    )
}

#[test]
fn init_is_seeded_small_and_bias_free() {
    let arch = ArchConfig::new(IMG, 11);
    let a: EstimatorParams<f32> = init_estimator(arch, &mut ChaCha8Rng::seed_from_u64(4));
    let b: EstimatorParams<f32> = init_estimator(arch, &mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(a, b);
    assert!(a.num_params() < 100_000);
    assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
    assert_eq!(arch.heatmap_dims(), GridDims::new(16, 12));
    assert!(a.is_finite());
}

#[test]
fn init_output_is_centered() {
    let arch = ArchConfig::new(IMG, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p: EstimatorParams<f32> = init_estimator(arch, &mut rng);
    let y = p.forward(&random_images(&mut rng, 8, IMG));
    let hw = y.h * y.w;
    for k in 0..y.c {
        let mean: f64 = (0..y.n)
            .flat_map(|n| y.item(n)[k * hw..(k + 1) * hw].iter().map(|&v| v as f64))
            .sum::<f64>()
            / (y.n * hw) as f64;
        assert!(mean.abs() < 0.1, "channel {k} mean {mean}");
    }
}

#[test]
fn forward_shapes_and_purity() {
    let arch = ArchConfig::new(IMG, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p: EstimatorParams<f32> = init_estimator(arch, &mut rng);
    let one = random_images::<f32>(&mut rng, 1, IMG);
    let mut x = Tensor::zeros(3, 1, 64, 48);
    for i in 0..3 {
        x.item_mut(i).copy_from_slice(&one.data);
    }
    let y = p.forward(&x);
    assert_eq!(y.shape(), [3, 11, 16, 12]);
    assert_eq!(y.item(0), y.item(1));
    assert_eq!(y.item(1), y.item(2));
    let (yt, _) = p.forward_train(&x);
    assert_eq!(yt, y);
    assert_eq!(y.to_heatmaps(crate::geometry::Frame::Easy).len(), 3);
}

#[test]
#[should_panic(expected = "input dims")]
fn forward_rejects_wrong_dims() {
    let p: EstimatorParams<f32> =
        init_estimator(ArchConfig::new(IMG, 11), &mut ChaCha8Rng::seed_from_u64(1));
    p.forward(&Tensor::zeros(1, 1, 32, 48));
}

#[test]
fn doubling_head_doubles_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p: EstimatorParams<f32> = init_estimator(ArchConfig::new(IMG, 11), &mut rng);
    let mut q = p.clone();
    let head = q.layers.last_mut().unwrap();
    head.bias.iter_mut().enumerate().for_each(|(i, b)| *b = 0.01 * i as f32);
    let mut p = p;
    p.layers.last_mut().unwrap().bias = head.bias.clone();
    head.weight.iter_mut().for_each(|w| *w *= 2.0);
    head.bias.iter_mut().for_each(|b| *b *= 2.0);
    let x = random_images(&mut rng, 2, IMG);
    let (y1, y2) = (p.forward(&x), q.forward(&x));
    for (a, b) in y1.data.iter().zip(&y2.data) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn zero_residual_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p: EstimatorParams<f64> = init_estimator(ArchConfig::new(IMG, 11), &mut rng);
    let x = random_images(&mut rng, 2, IMG);
    let (y, tape) = p.forward_train(&x);
    let (loss, dy) = mse_masked_loss_with_grad(&y, &y.clone(), &KeypointMask::all(2, 11));
    assert_eq!(loss, 0.0);
    assert!(p.backward(tape, &dy).is_zero());
}

#[test]
fn head_bias_gradient_is_mean_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let arch = ArchConfig::new(IMG, 4);
    let p: EstimatorParams<f64> = init_estimator(arch, &mut rng);
    let x = random_images(&mut rng, 3, IMG);
    let target = random_images::<f64>(&mut rng, 3 * 4, GridDims::new(16, 12));
    let target = Tensor::from_vec(3, 4, 16, 12, target.data);
    let (y, tape) = p.forward_train(&x);
    let (_, dy) = mse_masked_loss_with_grad(&y, &target, &KeypointMask::all(3, 4));
    let g = p.backward(tape, &dy);
    let db = g.tensors.last().unwrap();
    let hw = 16 * 12;
    for k in 0..4 {
        let mut sum = 0.0;
        for n in 0..3 {
            for i in 0..hw {
                let idx = (n * 4 + k) * hw + i;
                sum += y.data[idx] - target.data[idx];
            }
        }
        // Loss averages over all N*K*HW entries: d/db_k = 2 * mean_k(residual) / K.
        let mean_residual = sum / (3 * hw) as f64;
        let expect = 2.0 * mean_residual / 4.0;
        assert!((db[k] - expect).abs() < 1e-12, "{} vs {}", db[k], expect);
    }
}

/// Central-difference check of every parameter of a reduced net. Returns the
/// per-tensor relative error and the number of coordinates skipped because a
/// perturbation flipped a ReLU, where the loss is not differentiable.
fn finite_difference_errors(seed: u64) -> (Vec<(String, f64)>, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchConfig::new(GridDims::new(16, 16), 3).with_width(0.5);
    let mut p: EstimatorParams<f64> = init_estimator(arch, &mut rng);
    // Non-trivial head so every layer receives signal.
    for w in &mut p.layers[4].weight {
        *w *= 10.0;
    }
    let x = random_images(&mut rng, 2, arch.input);
    let hm = arch.heatmap_dims();
    let target = Tensor::from_vec(
        2,
        3,
        hm.height,
        hm.width,
        (0..2 * 3 * hm.len()).map(|_| rng.random::<f64>()).collect(),
    );
    let mask = KeypointMask::from_rows(vec![vec![true, true, false], vec![true, false, true]]);
    let loss = |p: &EstimatorParams<f64>| mse_masked_loss(&p.forward(&x), &target, &mask);
    let (y, tape) = p.forward_train(&x);
    let (_, dy) = mse_masked_loss_with_grad(&y, &target, &mask);
    let pattern = tape.active_units();
    let grads = p.backward(tape, &dy);
    let smooth = |q: &EstimatorParams<f64>| q.forward_train(&x).1.active_units() == pattern;
    let mut skipped = 0;
    let names = p.tensor_names();
    let step = 1e-3;
    let mut out = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let mut num = 0.0f64;
        let mut den_fd = 0.0f64;
        let mut den_an = 0.0f64;
        let len = grads.tensors[ti].len();
        for i in 0..len {
            let mut plus = p.clone();
            plus.tensors_mut().nth(ti).unwrap()[i] += step;
            let mut minus = p.clone();
            minus.tensors_mut().nth(ti).unwrap()[i] -= step;
            if !smooth(&plus) || !smooth(&minus) {
                skipped += 1;
                continue;
            }
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let an = grads.tensors[ti][i];
            num += (fd - an).powi(2);
            den_fd += fd * fd;
            den_an += an * an;
        }
        let rel = num.sqrt() / den_fd.sqrt().max(den_an.sqrt()).max(1e-12);
        out.push((name.clone(), rel));
    }
    (out, skipped, p.num_params())
}

#[test]
fn gradients_match_finite_differences() {
    let (errors, skipped, total) = finite_difference_errors(11);
    assert!(skipped * 10 < total, "{skipped} of {total} coordinates crossed a kink");
    for (name, rel) in errors {
        assert!(rel < 1e-4, "{name}: relative error {rel}");
    }
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let arch = ArchConfig::new(IMG, 11);
        let mut p: EstimatorParams<f32> = init_estimator(arch, &mut rng);
        let mut st = AdamState::new(&p);
        let x = random_images(&mut rng, 4, IMG);
        let t = random_images::<f32>(&mut rng, 4 * 11, GridDims::new(16, 12));
        let t = Tensor::from_vec(4, 11, 16, 12, t.data);
        for _ in 0..3 {
            let (y, tape) = p.forward_train(&x);
            let (_, dy) = mse_masked_loss_with_grad(&y, &t, &KeypointMask::all(4, 11));
            let g = p.backward(tape, &dy);
            adam_step(&mut st, &mut p, &g, 1e-3).unwrap();
        }
        p
    };
    let (a, b) = (run(), run());
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a, b);
}

#[test]
fn snapshot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    let p: EstimatorParams<f32> = init_estimator(
        ArchConfig::new(IMG, 11).with_width(1.5),
        &mut ChaCha8Rng::seed_from_u64(9),
    );
    save_params(&path, &p).unwrap();
    let q = load_params(&path).unwrap();
    assert_eq!(p, q);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&path, bytes).unwrap();
    assert!(load_params(&path).is_err());
}
