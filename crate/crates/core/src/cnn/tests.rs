use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::QpiError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn classifier_shape_trace() {
    let model = Model::<f32>::classifier(Init::Gaussian { std: 0.01 }, 1).unwrap();
    let trace = model.shape_trace().unwrap();
    let find = |name: &str| trace.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone()).unwrap();
    assert_eq!(find("conv1"), vec![64, 120, 120]);
    assert_eq!(find("conv2"), vec![96, 61, 61]);
    assert_eq!(find("pool2"), vec![96, 30, 30]);
    assert_eq!(find("conv3"), vec![128, 16, 16]);
    assert_eq!(find("conv4"), vec![256, 16, 16]);
    assert_eq!(find("pool4"), vec![256, 8, 8]);
    assert_eq!(find("conv5"), vec![256, 5, 5]);
    assert_eq!(find("fc6"), vec![1000]);
    assert_eq!(find("fc7"), vec![1]);
    assert_eq!(model.param_count(), 7_393_713);
}

#[test]
fn classifier_forward_runs_on_one_image() {
    let mut model = Model::<f32>::classifier(Init::Gaussian { std: 0.01 }, 1).unwrap();
    let x = random_tensor(&[1, 3, 120, 120], 2).cast::<f32>();
    let y = model.forward(x, Mode::Eval, &mut rng(0)).unwrap();
    assert_eq!(y.shape(), &[1, 1]);
    assert!(y.data()[0] > 0.0 && y.data()[0] < 1.0);
}

#[test]
fn identity_convolution_and_dense() {
    let mut conv = Model::<f64>::new([1, 1, 1], vec![LayerSpec::conv(1, 1, 1, 0)], Init::Gaussian { std: 0.1 }, 0).unwrap();
    conv.set_params(vec![vec![1.0], vec![0.0]]).unwrap();
    let x = Tensor::from_vec(&[2, 1, 1, 1], vec![0.25, -3.0]).unwrap();
    assert_eq!(conv.forward(x.clone(), Mode::Eval, &mut rng(0)).unwrap().data(), x.data());

    let mut dense = Model::<f64>::new([1, 1, 3], vec![LayerSpec::flatten(), LayerSpec::dense(3)], Init::He, 0).unwrap();
    let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    dense.set_params(vec![eye, vec![0.0; 3]]).unwrap();
    let x = Tensor::from_vec(&[1, 1, 1, 3], vec![0.5, -1.5, 2.0]).unwrap();
    assert_eq!(dense.forward(x, Mode::Eval, &mut rng(0)).unwrap().data(), &[0.5, -1.5, 2.0]);
}

#[test]
fn layer_shape_examples() {
    assert_eq!(LayerSpec::conv(3, 64, 1, 1).output_shape(&[3, 120, 120]).unwrap(), vec![64, 120, 120]);
    assert_eq!(LayerSpec::conv(2, 128, 2, 1).output_shape(&[96, 30, 30]).unwrap(), vec![128, 16, 16]);
    assert_eq!(LayerSpec::max_pool(2, 2).output_shape(&[96, 61, 61]).unwrap(), vec![96, 30, 30]);
    assert_eq!(LayerSpec::max_pool(2, 2).output_shape(&[256, 16, 16]).unwrap(), vec![256, 8, 8]);
    assert_eq!(LayerSpec::dense(1000).output_shape(&[6400]).unwrap(), vec![1000]);
    let floor = LayerSpec::conv(3, 256, 2, 1);
    assert_eq!(floor.output_shape(&[256, 8, 8]).unwrap(), vec![256, 4, 4]);
    assert!(LayerSpec::conv(5, 1, 1, 0).output_shape(&[1, 3, 3]).is_err());
    assert!(LayerSpec::dense(4).output_shape(&[2, 2, 2]).is_err());
    assert!(LayerSpec::dropout(1.0).validate().is_err());
}

#[test]
fn constant_input_pools_to_constant() {
    let mut m = Model::<f64>::new([2, 6, 6], vec![LayerSpec::max_pool(2, 2)], Init::He, 0).unwrap();
    let x = Tensor::from_vec(&[1, 2, 6, 6], vec![0.7; 72]).unwrap();
    let y = m.forward(x, Mode::Eval, &mut rng(0)).unwrap();
    assert_eq!(y.shape(), &[1, 2, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 0.7));
}

#[test]
fn eval_is_deterministic_and_zero_dropout_matches_it() {
    let specs = vec![
        LayerSpec::conv(3, 4, 1, 1),
        LayerSpec::relu(),
        LayerSpec::dropout(0.0),
        LayerSpec::flatten(),
        LayerSpec::dense(2),
    ];
    let mut m = Model::<f64>::new([2, 6, 6], specs, Init::He, 3).unwrap();
    let x = random_tensor(&[3, 2, 6, 6], 4);
    let a = m.forward(x.clone(), Mode::Eval, &mut rng(1)).unwrap();
    let b = m.forward(x.clone(), Mode::Eval, &mut rng(2)).unwrap();
    let c = m.forward(x, Mode::Train, &mut rng(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

/// Runs the model to a scalar loss. With a sigmoid head the loss is binary
/// cross-entropy on the logits; otherwise `Σ out·r` for a fixed `r`.
fn scalar_loss(model: &mut Model<f64>, x: &Tensor<f64>, targets: &[f32], r: &Tensor<f64>, lambda: f64) -> f64 {
    let out = model.logits(x.clone(), Mode::Train, &mut rng(99)).unwrap();
    let data = if targets.is_empty() {
        out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    } else {
        bce_with_logits(&out, targets).unwrap().0
    };
    data + model.l2_penalty(lambda)
}

fn gradient_check(specs: Vec<LayerSpec>, input: [usize; 3], batch: usize, targets: &[f32], lambda: f64) -> f64 {
    let mut model = Model::<f64>::new(input, specs, Init::Gaussian { std: 0.3 }, 5).unwrap();
    // Non-zero biases so every bias path is exercised.
    let mut r = rng(6);
    for p in model.params_mut() {
        if !p.decay {
            p.value.iter_mut().for_each(|v| *v = r.gen_range(-0.2..0.2));
        }
    }
    let x = random_tensor(&[batch, input[0], input[1], input[2]], 7);
    let out = model.logits(x.clone(), Mode::Train, &mut rng(99)).unwrap();
    let r_out = random_tensor(out.shape(), 8);
    let grad = if targets.is_empty() {
        r_out.clone()
    } else {
        bce_with_logits(&out, targets).unwrap().1
    };
    model.zero_grads();
    let dx = model.backward(grad).unwrap();
    model.add_l2_gradient(lambda);

    // Small enough that ReLU and max-pool kinks are rarely crossed.
    let eps = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    for (pi, grads) in analytic.iter().enumerate() {
        let stride = (grads.len() / 40).max(1);
        for i in (0..grads.len()).step_by(stride) {
            let orig = model.params()[pi].value[i];
            model.params_mut()[pi].value[i] = orig + eps;
            let up = scalar_loss(&mut model, &x, targets, &r_out, lambda);
            model.params_mut()[pi].value[i] = orig - eps;
            let down = scalar_loss(&mut model, &x, targets, &r_out, lambda);
            model.params_mut()[pi].value[i] = orig;
            let e = rel(grads[i], (up - down) / (2.0 * eps));
            worst = worst.max(e);
        }
    }
    let stride = (x.len() / 40).max(1);
    for i in (0..x.len()).step_by(stride) {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let up = scalar_loss(&mut model, &xp, targets, &r_out, lambda);
        xp.data_mut()[i] -= 2.0 * eps;
        let down = scalar_loss(&mut model, &xp, targets, &r_out, lambda);
        worst = worst.max(rel(dx.data()[i], (up - down) / (2.0 * eps)));
    }
    worst
}

#[test]
fn gradients_of_each_layer_kind() {
    let cases: Vec<(&str, Vec<LayerSpec>, [usize; 3])> = vec![
        ("conv", vec![LayerSpec::conv(3, 3, 1, 1)], [2, 6, 6]),
        ("strided conv", vec![LayerSpec::conv(3, 2, 2, 2)], [2, 7, 7]),
        ("ceil conv", vec![LayerSpec::conv(3, 2, 2, 1).with_rounding(Rounding::Ceil)], [2, 8, 8]),
        ("pool", vec![LayerSpec::max_pool(2, 2)], [2, 6, 6]),
        ("relu", vec![LayerSpec::relu()], [1, 4, 4]),
        ("tanh", vec![LayerSpec::tanh()], [1, 4, 4]),
        ("sigmoid", vec![LayerSpec::sigmoid(), LayerSpec::flatten(), LayerSpec::dense(2)], [1, 3, 3]),
        ("dropout", vec![LayerSpec::dropout(0.5)], [1, 4, 4]),
        ("flatten+dense", vec![LayerSpec::flatten(), LayerSpec::dense(3)], [2, 3, 3]),
    ];
    for (name, specs, input) in cases {
        let err = gradient_check(specs, input, 2, &[], 0.0);
        assert!(err < 1e-3, "{name}: max relative error {err}");
    }
}

#[test]
fn gradients_of_a_tiny_stack() {
    let specs = vec![
        LayerSpec::conv(3, 4, 1, 1),
        LayerSpec::relu(),
        LayerSpec::max_pool(2, 2),
        LayerSpec::conv(3, 4, 2, 1).with_rounding(Rounding::Ceil),
        LayerSpec::relu(),
        LayerSpec::dropout(0.2),
        LayerSpec::flatten(),
        LayerSpec::dense(5),
        LayerSpec::tanh(),
        LayerSpec::dense(1),
        LayerSpec::sigmoid(),
    ];
    let err = gradient_check(specs, [3, 8, 8], 3, &[1.0, 0.0, 1.0], 1e-3);
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn zero_loss_gradient_leaves_only_l2() {
    let specs = vec![LayerSpec::conv(3, 2, 1, 1), LayerSpec::flatten(), LayerSpec::dense(2)];
    let mut m = Model::<f64>::new([1, 4, 4], specs, Init::He, 1).unwrap();
    let x = random_tensor(&[2, 1, 4, 4], 2);
    let out = m.forward(x, Mode::Train, &mut rng(0)).unwrap();
    m.zero_grads();
    m.backward(Tensor::zeros(out.shape())).unwrap();
    m.add_l2_gradient(1e-3);
    for p in m.params() {
        for (g, w) in p.grad.iter().zip(&p.value) {
            let expected = if p.decay { 1e-3 * w } else { 0.0 };
            assert_eq!(*g, expected);
        }
    }
    m.zero_grads();
    m.add_l2_gradient(2e-3);
    let p = &m.params()[0];
    assert!(p.grad.iter().zip(&p.value).all(|(g, w)| (g - 2e-3 * w).abs() < 1e-18));
}

#[test]
fn parameter_only_backward_matches_full_backward() {
    let specs = vec![
        LayerSpec::conv(3, 3, 1, 1),
        LayerSpec::relu(),
        LayerSpec::conv(3, 2, 2, 1),
        LayerSpec::flatten(),
        LayerSpec::dense(1),
    ];
    let mut a = Model::<f64>::new([2, 6, 6], specs, Init::He, 4).unwrap();
    let mut b = a.clone();
    let x = random_tensor(&[2, 2, 6, 6], 5);
    let g = random_tensor(&[2, 1], 6);
    a.forward(x.clone(), Mode::Train, &mut rng(0)).unwrap();
    a.backward(g.clone()).unwrap();
    b.forward(x, Mode::Train, &mut rng(0)).unwrap();
    b.backward_params(g).unwrap();
    for (pa, pb) in a.params().iter().zip(b.params()) {
        assert_eq!(pa.grad, pb.grad);
    }
}

#[test]
fn backward_needs_forward() {
    let mut m = Model::<f64>::new([1, 4, 4], vec![LayerSpec::relu()], Init::He, 1).unwrap();
    assert!(matches!(m.backward(Tensor::zeros(&[1, 1, 4, 4])), Err(QpiError::State(_))));
}

#[test]
fn non_finite_activation_names_the_layer() {
    let specs = vec![LayerSpec::conv(1, 1, 1, 0), LayerSpec::relu()];
    let mut m = Model::<f64>::new([1, 2, 2], specs, Init::He, 1).unwrap();
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, f64::NAN, 0.0, 0.0]).unwrap();
    match m.forward(x, Mode::Eval, &mut rng(0)) {
        Err(QpiError::NumericFault { layer, .. }) => assert_eq!(layer, "conv1"),
        other => panic!("expected a numeric fault, got {other:?}"),
    }
}

#[test]
fn sgd_arithmetic() {
    let mut w = [1.0f64];
    let mut v = [0.0f64];
    sgd_step(&mut w, &[1.0], &mut v, 0.1, 0.9);
    assert!((v[0] + 0.1).abs() < 1e-15);
    assert!((w[0] - 0.9).abs() < 1e-15);
    sgd_step(&mut w, &[1.0], &mut v, 0.1, 0.9);
    assert!((v[0] + 0.19).abs() < 1e-15);
    assert!((w[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);

    let mut w = [0.0f64];
    let mut v = [1.0f64];
    for _ in 0..5 {
        let before = v[0];
        sgd_step(&mut w, &[0.0], &mut v, 0.1, 0.9);
        assert!((v[0] - 0.9 * before).abs() < 1e-15);
    }
}

#[test]
fn pure_l2_decays_weights_monotonically() {
    let mut m = Model::<f64>::new([1, 3, 3], vec![LayerSpec::flatten(), LayerSpec::dense(4)], Init::He, 9).unwrap();
    let mut prev: f64 = m.params()[0].value.iter().map(|w| w * w).sum();
    for _ in 0..50 {
        m.zero_grads();
        m.add_l2_gradient(0.5);
        for p in m.params_mut() {
            sgd_step_param(p, 0.1, 0.0);
        }
        let now: f64 = m.params()[0].value.iter().map(|w| w * w).sum();
        assert!(now < prev);
        prev = now;
    }
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig::default();
    assert_eq!(lr_schedule(0, &c), 1e-4);
    assert_eq!(lr_schedule(3, &c), 1e-4);
    assert_eq!(lr_schedule(4, &c), 5e-5);
    assert!((lr_schedule(8, &c) - 3.333_333e-5).abs() < 1e-10);
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let mut m = Model::<f64>::new([1, 1, 8], vec![LayerSpec::dropout(0.5)], Init::He, 0).unwrap();
    let x = Tensor::from_vec(&[1, 1, 1, 8], (1..=8).map(|v| v as f64).collect()).unwrap();
    let mut sum = vec![0.0; 8];
    let mut r = rng(5);
    let trials = 20_000;
    for _ in 0..trials {
        let y = m.forward(x.clone(), Mode::Train, &mut r).unwrap();
        sum.iter_mut().zip(y.data()).for_each(|(s, v)| *s += v);
    }
    for (s, v) in sum.iter().zip(x.data()) {
        let mean = s / trials as f64;
        assert!((mean - v).abs() / v < 0.02, "{mean} vs {v}");
    }
}

fn blob_data(n: usize, seed: u64, side: usize) -> Vec<(Vec<f32>, f32)> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as f32;
            // Class 1: bright blob upper left; class 0: lower right.
            let (cy, cx) = if label == 1.0 { (0.3, 0.3) } else { (0.7, 0.7) };
            let cy = cy + r.gen_range(-0.08..0.08);
            let cx = cx + r.gen_range(-0.08..0.08);
            let s = side as f64;
            let img = (0..side * side)
                .map(|k| {
                    let (y, x) = ((k / side) as f64 / s, (k % side) as f64 / s);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    ((-d2 / 0.02).exp() + r.gen_range(-0.1..0.1)) as f32
                })
                .collect();
            (img, label)
        })
        .collect()
}

fn small_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(3, 4, 1, 1),
        LayerSpec::relu(),
        LayerSpec::max_pool(2, 2),
        LayerSpec::flatten(),
        LayerSpec::dense(8),
        LayerSpec::tanh(),
        LayerSpec::dense(1),
        LayerSpec::sigmoid(),
    ]
}

#[test]
fn one_epoch_bookkeeping_and_determinism() {
    let data = InMemoryData {
        sample_shape: [1, 12, 12],
        train: blob_data(64, 1, 12),
        val: blob_data(16, 2, 12),
    };
    let config = TrainConfig {
        epochs: 1,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let model = Model::<f32>::new([1, 12, 12], small_specs(), config.init(), config.seed).unwrap();
        train(model, &data, &config).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.log.len(), 1);
    assert_eq!(a.log[0].batches, 2);
    assert!(a.diverged.is_none());
    let wa: Vec<Vec<u32>> = a.model.params().iter().map(|p| p.value.iter().map(|v| v.to_bits()).collect()).collect();
    let wb: Vec<Vec<u32>> = b.model.params().iter().map(|p| p.value.iter().map(|v| v.to_bits()).collect()).collect();
    assert_eq!(wa, wb);
}

#[test]
fn checkpoint_round_trip() {
    let model = Model::<f32>::new([1, 12, 12], small_specs(), Init::He, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.qpn");
    let config = TrainConfig {
        seed: 77,
        ..TrainConfig::default()
    };
    save_checkpoint(&path, &model, &config).unwrap();
    let (back, cfg) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg, Some(config));
    assert_eq!(back.specs(), model.specs());
    for (a, b) in back.params().iter().zip(model.params()) {
        assert_eq!(a.value, b.value);
    }
    std::fs::write(&path, b"QPN1short").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn separable_blobs_are_learned_with_the_standard_schedule() {
    let data = InMemoryData {
        sample_shape: [1, 12, 12],
        train: blob_data(2048, 11, 12),
        val: blob_data(256, 12, 12),
    };
    for init in [InitScheme::Gaussian, InitScheme::He] {
        let config = TrainConfig {
            init,
            seed: 21,
            ..TrainConfig::default()
        };
        let model = Model::<f32>::new([1, 12, 12], small_specs(), config.init(), config.seed).unwrap();
        let out = train(model, &data, &config).unwrap();
        let last = out.log.last().unwrap();
        assert_eq!(out.log.len(), 15);
        assert!(last.val_accuracy >= 0.98, "{init:?}: {:?}", out.log);
    }
}
