use rand::Rng;

use super::gradcheck::{check_network_gradients, GradCheckOptions};
use super::*;
use crate::seeding::rng_for;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(&[seed]);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

/// `loss = Σ r ⊙ F(x)` with a fixed random projection `r`.
fn projection_loss(r: Tensor) -> impl Fn(&mut Network, &Tensor, bool) -> Result<f64, NnError> {
    move |net, x, backprop| {
        let z = net.forward_features(x, Mode::Train)?;
        let v = z.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        if backprop {
            net.backward(&r)?;
        }
        Ok(v)
    }
}

fn assert_grads_ok(net: &Network, x: &Tensor, seed: u64) {
    let z = net.features(x).unwrap();
    let r = random_tensor(z.shape(), seed);
    let reports = check_network_gradients(net, x, projection_loss(r), &GradCheckOptions::default()).unwrap();
    assert!(!reports.is_empty());
    for rep in reports {
        assert!(rep.max_rel_error <= 1e-4, "{} rel err {}", rep.layer, rep.max_rel_error);
    }
}

#[test]
fn identity_network_passes_batch_through() {
    let mut net = Architecture::Identity.build(InputShape::flat(3), 2, 0).unwrap();
    let x = random_tensor(&[4, 3], 1);
    assert_eq!(net.forward_features(&x, Mode::Train).unwrap(), x);
    assert_eq!(net.features(&x).unwrap(), x);
}

#[test]
fn zero_dense_layer_gives_zero_features() {
    let mut net = Network::new(InputShape::flat(4), &[LayerSpec::Dense { outputs: 3, bias: true }], 2, 7).unwrap();
    for t in net.params_mut().tensors_mut() {
        if t.name().starts_with("dense") {
            t.value_mut().fill(0.0);
        }
    }
    let z = net.features(&random_tensor(&[5, 4], 2)).unwrap();
    assert_eq!(z.shape(), &[5, 3]);
    assert!(z.data().iter().all(|&v| v == 0.0));
}

fn naive_matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a[i * k + p] * b[p * m + j];
            }
        }
    }
    out
}

#[test]
fn mlp_forward_matches_triple_loop_oracle() {
    let arch = Architecture::Mlp {
        hidden: 5,
        features: 4,
        batch_norm: false,
    };
    let net = arch.build(InputShape::flat(3), 2, 11).unwrap();
    let x = random_tensor(&[6, 3], 3);
    let p = net.params();
    let (w1, b1, w2, b2) = (p.get(0).value(), p.get(1).value(), p.get(2).value(), p.get(3).value());
    let mut h = naive_matmul(x.data(), 6, 3, w1.data(), 5);
    for (i, v) in h.iter_mut().enumerate() {
        *v = (*v + b1.data()[i % 5]).max(0.0);
    }
    let mut z = naive_matmul(&h, 6, 5, w2.data(), 4);
    for (i, v) in z.iter_mut().enumerate() {
        *v = (*v + b2.data()[i % 4]).max(0.0);
    }
    let got = net.features(&x).unwrap();
    for (a, b) in got.data().iter().zip(&z) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn classify_cases() {
    let mut net = Architecture::Identity.build(InputShape::flat(3), 3, 0).unwrap();
    let logits = net.classify(&Tensor::zeros(&[2, 3])).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));

    let w = random_tensor(&[3, 3], 5);
    net.params_mut().classifier_mut().data_mut().copy_from_slice(w.data());
    let e1 = Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
    assert_eq!(net.classify(&e1).unwrap().data(), w.row(1));

    let z = random_tensor(&[4, 3], 6);
    let oracle = naive_matmul(z.data(), 4, 3, w.data(), 3);
    let got = net.classify(&z).unwrap();
    for (a, b) in got.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(net.classify(&Tensor::zeros(&[2, 4])), Err(NnError::ShapeMismatch { .. })));
}

#[test]
fn input_shape_mismatch_names_input() {
    let net = Architecture::default().build(InputShape::image(1, 28, 28), 10, 0).unwrap();
    match net.features(&Tensor::zeros(&[2, 100])) {
        Err(NnError::ShapeMismatch { layer, .. }) => assert_eq!(layer, "input"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn backward_without_forward_is_an_error() {
    let mut net = Architecture::Mlp {
        hidden: 3,
        features: 2,
        batch_norm: false,
    }
    .build(InputShape::flat(2), 2, 0)
    .unwrap();
    let err = net.backward(&Tensor::zeros(&[1, 2])).unwrap_err();
    assert!(matches!(err, NnError::MissingForwardCache { .. }));
}

#[test]
fn zero_upstream_gradient_gives_zero_param_grads() {
    let mut net = Architecture::Mlp {
        hidden: 4,
        features: 3,
        batch_norm: true,
    }
    .build(InputShape::flat(3), 2, 4)
    .unwrap();
    let x = random_tensor(&[5, 3], 8);
    let z = net.forward_features(&x, Mode::Train).unwrap();
    net.backward(&Tensor::zeros(z.shape())).unwrap();
    assert!(net.params().flat_trainable_grads().iter().all(|&g| g == 0.0));
}

#[test]
fn dense_squared_error_matches_closed_form() {
    // L = (1/n) Σ ||x w - y||², dL/dw = 2 xᵀ(xw − y)/n
    let mut net = Network::new(InputShape::flat(3), &[LayerSpec::Dense { outputs: 2, bias: false }], 2, 3).unwrap();
    let x = random_tensor(&[5, 3], 9);
    let y = random_tensor(&[5, 2], 10);
    let z = net.forward_features(&x, Mode::Train).unwrap();
    let n = 5.0;
    let mut dz = z.clone();
    dz.add_scaled(&y, -1.0);
    let resid = dz.clone();
    dz.scale(2.0 / n);
    net.backward(&dz).unwrap();
    let mut expected = naive_matmul(x.transpose().data(), 3, 5, resid.data(), 2);
    expected.iter_mut().for_each(|v| *v *= 2.0 / n);
    let got = net.params().get(0).grad();
    for (a, b) in got.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn dense_and_relu_gradients_match_finite_differences() {
    for seed in 0..5 {
        let net = Architecture::Mlp {
            hidden: 6,
            features: 4,
            batch_norm: false,
        }
        .build(InputShape::flat(5), 3, seed)
        .unwrap();
        assert_grads_ok(&net, &random_tensor(&[7, 5], 100 + seed), 200 + seed);
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for seed in 0..3 {
        let net = Architecture::Mlp {
            hidden: 5,
            features: 4,
            batch_norm: true,
        }
        .build(InputShape::flat(3), 3, seed)
        .unwrap();
        assert_grads_ok(&net, &random_tensor(&[6, 3], 300 + seed), 400 + seed);
    }
}

fn small_cnn(batch_norm: bool, seed: u64) -> Network {
    let mut specs = vec![LayerSpec::Conv2d {
        out_channels: 3,
        kernel: 3,
    }];
    if batch_norm {
        specs.push(LayerSpec::BatchNorm);
    }
    specs.extend([
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::Conv2d {
            out_channels: 2,
            kernel: 2,
        },
        LayerSpec::Relu,
        LayerSpec::Dense { outputs: 4, bias: true },
    ]);
    Network::new(InputShape::image(2, 8, 8), &specs, 3, seed).unwrap()
}

#[test]
fn conv_pool_gradients_match_finite_differences() {
    for seed in 0..3 {
        assert_grads_ok(&small_cnn(false, seed), &random_tensor(&[3, 128], 500 + seed), 600 + seed);
        assert_grads_ok(&small_cnn(true, seed), &random_tensor(&[3, 128], 700 + seed), 800 + seed);
    }
}

#[test]
fn conv_forward_matches_direct_convolution() {
    let net = Network::new(
        InputShape::image(2, 5, 4),
        &[LayerSpec::Conv2d {
            out_channels: 3,
            kernel: 2,
        }],
        2,
        1,
    )
    .unwrap();
    let x = random_tensor(&[2, 40], 12);
    let w = net.params().get(0).value();
    let b = net.params().get(1).value();
    let got = net.features(&x).unwrap();
    let (oh, ow) = (4, 3);
    for img in 0..2 {
        for oc in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[oc];
                    for c in 0..2 {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                s += w.data()[((oc * 2 + c) * 2 + ky) * 2 + kx]
                                    * x.row(img)[c * 20 + (oy + ky) * 4 + ox + kx];
                            }
                        }
                    }
                    let v = got.row(img)[oc * oh * ow + oy * ow + ox];
                    assert!((v - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn eval_mode_forward_is_pure() {
    let mut net = Architecture::Mlp {
        hidden: 4,
        features: 3,
        batch_norm: true,
    }
    .build(InputShape::flat(3), 2, 4)
    .unwrap();
    let x = random_tensor(&[5, 3], 8);
    net.forward_features(&x, Mode::Train).unwrap();
    net.clear_cache();
    let before = net.params().clone();
    let a = net.forward_features(&x, Mode::Eval).unwrap();
    let b = net.forward_features(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(&before, net.params());
    assert!(!net.has_forward_cache());
}

#[test]
fn train_mode_updates_running_stats() {
    let mut net = Architecture::Mlp {
        hidden: 4,
        features: 3,
        batch_norm: true,
    }
    .build(InputShape::flat(3), 2, 4)
    .unwrap();
    let before = net.params().clone();
    net.forward_features(&random_tensor(&[5, 3], 8), Mode::Train).unwrap();
    let changed = net
        .params()
        .tensors()
        .iter()
        .zip(before.tensors())
        .filter(|(a, b)| a.value() != b.value())
        .map(|(a, _)| a.name().to_string())
        .collect::<Vec<_>>();
    assert!(changed.iter().all(|n| n.contains("running")));
    assert!(!changed.is_empty());
}

#[test]
fn sgd_step_follows_schedule_and_zeroes_grads() {
    let mut net = Architecture::Identity.build(InputShape::flat(2), 2, 0).unwrap();
    let start = net.params().classifier().clone();
    net.params_mut().get_mut(0).grad_mut().fill(1.0);
    let mut opt = OptimizerState::new(0.5, 4);
    sgd_step(net.params_mut(), &mut opt);
    for (a, b) in net.params().classifier().data().iter().zip(start.data()) {
        assert!((a - (b - 0.5)).abs() < 1e-15);
    }
    assert!(net.params().flat_trainable_grads().iter().all(|&g| g == 0.0));

    // t = T: lr = 0, parameters unchanged.
    opt.set_round(4);
    let before = net.params().clone();
    net.params_mut().get_mut(0).grad_mut().fill(3.0);
    sgd_step(net.params_mut(), &mut opt);
    assert_eq!(before.classifier(), net.params().classifier());
}

#[test]
fn same_seed_training_is_bit_identical() {
    let run = || {
        let mut net = small_cnn(true, 9);
        let mut opt = OptimizerState::new(0.05, 10);
        for step in 0..5 {
            let x = random_tensor(&[4, 128], 900 + step);
            let z = net.forward_features(&x, Mode::Train).unwrap();
            let logits = net.classify(&z).unwrap();
            let mut g = logits.clone();
            g.scale(0.1);
            let dz = net.classify_backward(&z, &g).unwrap();
            net.backward(&dz).unwrap();
            sgd_step(net.params_mut(), &mut opt);
        }
        net.params().clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn default_cnn_has_expected_geometry() {
    let net = Architecture::default().build(InputShape::image(1, 28, 28), 10, 0).unwrap();
    assert_eq!(net.feature_dim(), 128);
    assert_eq!(net.num_classes(), 10);
    assert_eq!(net.params().classifier().shape(), &[128, 10]);
    // conv1 832 + conv2 51264 + dense 131200 + classifier 1280
    assert_eq!(net.params().scalar_count(), 832 + 51_264 + 131_200 + 1_280);
    let z = net.features(&Tensor::zeros(&[2, 784])).unwrap();
    assert_eq!(z.shape(), &[2, 128]);
}
