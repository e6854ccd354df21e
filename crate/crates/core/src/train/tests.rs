use approx::assert_abs_diff_eq;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{make_pair, Raster8};
use crate::model::SsiuConfig;
use crate::Image;

fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((c, h, w), |_| rng.gen::<f64>())
}

/// `Σ|Re| + Σ|Im|` of the direct-summation DFT of every plane.
fn dft_abs_sum(img: &Image) -> f64 {
    let (c, h, w) = img.dim();
    let mut total = 0.0;
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let t = -2.0 * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re += img[[ch, y, x]] * t.cos();
                        im += img[[ch, y, x]] * t.sin();
                    }
                }
                total += re.abs() + im.abs();
            }
        }
    }
    total
}

#[test]
fn l1_examples() {
    let a = random_image(1, 3, 5, 4);
    assert_eq!(loss_l1(&a, &a).unwrap(), 0.0);
    assert_abs_diff_eq!(loss_l1(&(&a + 0.1), &a).unwrap(), 0.1, epsilon = 1e-12);
    let b = random_image(2, 3, 5, 4);
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        sum += (x - y).abs();
    }
    assert_abs_diff_eq!(loss_l1(&a, &b).unwrap(), sum / 60.0, epsilon = 1e-14);
    assert!(loss_l1(&a, &random_image(3, 3, 4, 5)).is_err());
}

#[test]
fn fft_loss_of_equal_images_is_zero() {
    let a = random_image(4, 3, 6, 7);
    assert_eq!(loss_fft(&a, &a).unwrap(), 0.0);
}

#[test]
fn fft_loss_of_single_pixel_difference() {
    let delta = 0.25;
    let gt = Array3::<f64>::zeros((1, 4, 4));
    // An impulse at the origin has the flat spectrum δ: 16 real parts of
    // magnitude δ over 2·16 real numbers.
    let mut pred = gt.clone();
    pred[[0, 0, 0]] = delta;
    assert_abs_diff_eq!(loss_fft(&pred, &gt).unwrap(), delta * 16.0 / 32.0, epsilon = 1e-14);
    // Off-origin impulses rotate the phase; compare with direct summation.
    for (y, x) in [(1, 2), (3, 1), (2, 2)] {
        let mut pred = gt.clone();
        pred[[0, y, x]] = delta;
        let expected = dft_abs_sum(&pred) / 32.0;
        assert_abs_diff_eq!(loss_fft(&pred, &gt).unwrap(), expected, epsilon = 1e-12);
    }
    // At (1, 1) the phases are multiples of π/2, so every coefficient has
    // exactly one non-zero part: loss δ/2 again.
    let mut pred = gt.clone();
    pred[[0, 1, 1]] = delta;
    assert_abs_diff_eq!(loss_fft(&pred, &gt).unwrap(), delta / 2.0, epsilon = 1e-12);
}

#[test]
fn fft_loss_matches_direct_summation_on_random_pairs() {
    let a = random_image(5, 2, 5, 6);
    let b = random_image(6, 2, 5, 6);
    let expected = dft_abs_sum(&(&a - &b)) / (2.0 * 60.0);
    assert_abs_diff_eq!(loss_fft(&a, &b).unwrap(), expected, epsilon = 1e-12);
}

#[test]
fn circular_shift_changes_phase_but_not_amplitude() {
    let a = random_image(7, 1, 8, 8);
    let shifted = Array3::from_shape_fn((1, 8, 8), |(c, y, x)| a[[c, (y + 3) % 8, (x + 5) % 8]]);
    assert!(loss_fft(&a, &shifted).unwrap() > 1e-3);
    let (amp, _) = fft_with_grad(&a, &shifted, FftLossKind::Amplitude).unwrap();
    assert_abs_diff_eq!(amp, 0.0, epsilon = 1e-12);
}

fn check_gradient(f: impl Fn(&Image) -> (f64, Image), x: &Image) {
    let (_, g) = f(x);
    let h = 1e-7;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..40 {
        let idx = (rng.gen_range(0..x.dim().0), rng.gen_range(0..x.dim().1), rng.gen_range(0..x.dim().2));
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        let fd = (f(&xp).0 - f(&xm).0) / (2.0 * h);
        assert_abs_diff_eq!(g[idx], fd, epsilon = 1e-6);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let gt = random_image(8, 3, 6, 5);
    let x = random_image(9, 3, 6, 5);
    check_gradient(|p| l1_with_grad(p, &gt).unwrap(), &x);
    check_gradient(|p| fft_with_grad(p, &gt, FftLossKind::Complex).unwrap(), &x);
    check_gradient(|p| fft_with_grad(p, &gt, FftLossKind::Amplitude).unwrap(), &x);
    check_gradient(
        |p| {
            let (parts, g) = total_loss_with_grad(p, &gt, 0.01, FftLossKind::Complex).unwrap();
            (parts.total, g)
        },
        &x,
    );
}

#[test]
fn total_loss_combines_components() {
    let a = random_image(10, 3, 8, 8);
    let b = random_image(11, 3, 8, 8);
    assert_eq!(total_loss(&a, &b, 0.0).unwrap(), loss_l1(&a, &b).unwrap());
    assert_eq!(total_loss(&a, &a, 0.01).unwrap(), 0.0);
    let hand = loss_l1(&a, &b).unwrap() + 0.01 * loss_fft(&a, &b).unwrap();
    assert_abs_diff_eq!(total_loss(&a, &b, 0.01).unwrap(), hand, epsilon = 1e-14);
    assert!(total_loss(&a, &b, -0.1).is_err());
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = TrainConfig {
        total_iters: 1000,
        ..TrainConfig::default()
    };
    assert_abs_diff_eq!(lr_at(0, &cfg).unwrap(), 1e-3, epsilon = 1e-18);
    assert_abs_diff_eq!(lr_at(1000, &cfg).unwrap(), 1e-6, epsilon = 1e-18);
    assert_abs_diff_eq!(lr_at(500, &cfg).unwrap(), 5.005e-4, epsilon = 1e-15);
    assert!(lr_at(1001, &cfg).is_err());
    let mut prev = f64::INFINITY;
    for i in 0..=1000 {
        let lr = lr_at(i, &cfg).unwrap();
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn config_validation_names_fields() {
    let bad = |f: fn(&mut TrainConfig), field: &str| {
        let mut c = TrainConfig::default();
        f(&mut c);
        match c.validate() {
            Err(Error::Config { field: got, .. }) => assert_eq!(got, field),
            other => panic!("{field}: {other:?}"),
        }
    };
    bad(|c| c.lr_init = 1e-7, "train.lr_init");
    bad(|c| c.lr_final = 0.0, "train.lr_final");
    bad(|c| c.lambda_f = -1.0, "train.lambda_f");
    bad(|c| c.batch_size = 0, "train.batch_size");
    bad(|c| c.adam.beta2 = 1.0, "train.adam.beta2");
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut store = crate::nn::ParamStore::new();
    let id = store.add("w", Tensor::from_elem(ndarray::IxDyn(&[3]), 1.0));
    let mut adam = Adam::new(AdamConfig::default(), &store);
    let g = Tensor::from_shape_vec(ndarray::IxDyn(&[3]), vec![2.0, -0.5, 0.0]).unwrap();
    adam.update(&mut store, &[g], 0.1);
    let w = store.get(id);
    assert_abs_diff_eq!(w[[0]], 0.9, epsilon = 1e-7);
    assert_abs_diff_eq!(w[[1]], 1.1, epsilon = 1e-7);
    assert_eq!(w[[2]], 1.0);
}

fn toy_cfg() -> SsiuConfig {
    let mut c = SsiuConfig::with_scale(2);
    c.channels = 8;
    c.num_stages = 2;
    c.moe_taps = vec![1, 2];
    c.msgm.hidden_channels = 8;
    c.esam.num_heads = 2;
    c
}

fn toy_data(n: usize, size: usize) -> Vec<StoredPair> {
    (0..n)
        .map(|i| {
            let hr = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
                let (y, x) = (y as f64 / size as f64, x as f64 / size as f64);
                0.5 + 0.3 * ((i as f64 + 1.0) * 3.0 * x + c as f64).sin() * (5.0 * y).cos()
            });
            let pair = make_pair(&hr, 2).unwrap();
            StoredPair {
                name: format!("toy{i}"),
                hr: Raster8::from_image(&pair.hr),
                lr: Raster8::from_image(&pair.lr),
                scale: 2,
            }
        })
        .collect()
}

fn small_train_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        patch_lr: 8,
        total_iters: 1,
        checkpoint_every: 1,
        log_every: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn parallel_and_serial_batches_agree() {
    let data = toy_data(3, 32);
    let cfg = TrainConfig {
        batch_size: 5,
        ..small_train_cfg()
    };
    let serial = assemble_batch(&data, &cfg, 7, 1).unwrap();
    let parallel = assemble_batch(&data, &cfg, 7, 3).unwrap();
    assert_eq!(serial.len(), 5);
    for (a, b) in serial.iter().zip(&parallel) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
    let other = assemble_batch(&data, &cfg, 8, 1).unwrap();
    assert!(serial.iter().zip(&other).any(|(a, b)| a.1 != b.1));
}

#[test]
fn small_step_along_gradient_decreases_loss() {
    let model = SsiuModel::build(&toy_cfg(), 1).unwrap();
    let data = toy_data(2, 32);
    let cfg = small_train_cfg();
    let batch: Vec<SrPair> = assemble_batch(&data, &cfg, 0, 1).unwrap().into_iter().map(|b| b.0).collect();
    let (before, grads) = batch_gradients(&model, &batch, &cfg, 1).unwrap();
    let mut stepped = model.clone();
    let mut adam = Adam::new(cfg.adam.clone(), &stepped.params);
    adam.update(&mut stepped.params, &grads, 1e-6);
    let (after, _) = batch_gradients(&stepped, &batch, &cfg, 1).unwrap();
    assert!(after.total < before.total, "{} !< {}", after.total, before.total);
}

#[test]
fn threaded_gradients_match_serial_bitwise() {
    let model = SsiuModel::build(&toy_cfg(), 2).unwrap();
    let data = toy_data(3, 32);
    let mut cfg = small_train_cfg();
    cfg.batch_size = 5;
    let batch: Vec<SrPair> = assemble_batch(&data, &cfg, 3, 1).unwrap().into_iter().map(|b| b.0).collect();
    let (p1, g1) = batch_gradients(&model, &batch, &cfg, 1).unwrap();
    for threads in [2, 3, 8] {
        let (p, g) = batch_gradients(&model, &batch, &cfg, threads).unwrap();
        assert_eq!(p.total.to_bits(), p1.total.to_bits());
        assert_eq!(g, g1);
    }
}

#[test]
fn frequency_term_changes_the_trajectory() {
    let data = TrainData {
        train: toy_data(2, 32),
        val: vec![],
    };
    let run = |lambda_f: f64| {
        let mut m = SsiuModel::build(&toy_cfg(), 3).unwrap();
        let cfg = TrainConfig {
            lambda_f,
            ..small_train_cfg()
        };
        train(&mut m, &data, &cfg, &TrainOptions::default()).unwrap();
        m.params
    };
    assert_ne!(run(0.0), run(0.01));
}

#[test]
fn one_iteration_checkpoint_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = RunDirs::create(tmp.path()).unwrap();
    let data = TrainData {
        train: toy_data(2, 32),
        val: toy_data(1, 24),
    };
    let mut m = SsiuModel::build(&toy_cfg(), 4).unwrap();
    let opts = TrainOptions {
        dirs: Some(&dirs),
        deterministic: true,
    };
    let out = train(&mut m, &data, &small_train_cfg(), &opts).unwrap();
    assert_eq!(out.history.len(), 1);
    assert!(out.history[0].val_psnr.unwrap().is_finite());
    let ckpt = dirs.checkpoints.join(checkpoint_name(1));
    assert_eq!(out.checkpoints, vec![ckpt.clone(), dirs.checkpoints.join("final.ckpt")]);
    let back = checkpoint::load(&ckpt).unwrap();
    let x = random_image(12, 3, 12, 10);
    assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
    let log = std::fs::read_to_string(dirs.logs.join("metrics.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(rec["iteration"], 1);
    assert!(rec["val_psnr"].is_number());
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = RunDirs::create(tmp.path()).unwrap();
    let data = TrainData {
        train: toy_data(2, 32),
        val: vec![],
    };
    let mut m = SsiuModel::build(&toy_cfg(), 5).unwrap();
    let cfg = TrainConfig {
        lr_init: 1e300,
        lr_final: 1e300,
        total_iters: 5,
        ..small_train_cfg()
    };
    let opts = TrainOptions {
        dirs: Some(&dirs),
        deterministic: true,
    };
    match train(&mut m, &data, &cfg, &opts) {
        Err(Error::NumericalFailure { iteration, message }) => {
            assert!(iteration >= 2);
            assert!(message.contains("toy"), "{message}");
            assert!(message.contains("lr 1e300"), "{message}");
        }
        other => panic!("expected numerical failure, got {other:?}"),
    }
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dirs.logs.join("failure.json")).unwrap()).unwrap();
    assert_eq!(dump["batch"].as_array().unwrap().len(), 2);
}

#[test]
fn training_rejects_bad_inputs() {
    let mut m = SsiuModel::build(&toy_cfg(), 6).unwrap();
    let empty = TrainData::default();
    assert!(train(&mut m, &empty, &small_train_cfg(), &TrainOptions::default()).is_err());
    let data = TrainData {
        train: toy_data(1, 32),
        val: vec![],
    };
    let cfg = TrainConfig {
        patch_lr: 17,
        ..small_train_cfg()
    };
    assert!(train(&mut m, &data, &cfg, &TrainOptions::default()).is_err());
}
