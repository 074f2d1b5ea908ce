use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uap::datagen::{assign_domains, make_blob_domains, AssignedDomains, BlobSpec, DomainAssignment, DomainDataset};
use uap::federation::{
    aggregate, client_stage, client_stage_with_labels, evaluate, server_stage, ClientState, Federation, ServerState,
    StageConfig, TrainingMode,
};
use uap::harness::load_mnist_splits;
use uap::datagen::rotate_domain;
use uap::nncore::{Architecture, InputShape, Mode, ModelParams, Network, OptimizerState, Tensor};
use uap::pseudolabel::{generate_pseudo_labels, pseudo_label_accuracy};

fn bits(p: &ModelParams) -> Vec<Vec<u64>> {
    p.tensors().iter().map(|t| t.value().data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn mlp(batch_norm: bool) -> Architecture {
    Architecture::Mlp {
        hidden: 12,
        features: 6,
        batch_norm,
    }
}

fn blob_domains(domains: usize, shift: f64, n_per_class: usize) -> Vec<DomainDataset> {
    make_blob_domains(&BlobSpec {
        classes: 3,
        dims: 5,
        domains,
        shift_scale: shift,
        n_per_class,
        seed: 2,
        ..BlobSpec::default()
    })
    .unwrap()
}

fn assigned(domains: usize) -> AssignedDomains {
    assigned_sized(domains, 20)
}

/// Blob domains large enough for default-sized (64) minibatches.
fn assigned_sized(domains: usize, n_per_class: usize) -> AssignedDomains {
    let plan = DomainAssignment {
        server: "B0".into(),
        test: "B1".into(),
        clients: None,
        split: None,
    };
    assign_domains(&blob_domains(domains, 1.5, n_per_class), &plan).unwrap()
}

fn stage_cfg(mode: TrainingMode) -> StageConfig {
    StageConfig {
        mode,
        batch_size: 16,
        local_epochs: 1,
        ..StageConfig::default()
    }
}

fn federation(arch: Architecture, domains: usize, cfg: StageConfig, seed: u64) -> Federation {
    let a = assigned(domains);
    let init = arch.build(a.server.input_shape(), 3, seed).unwrap();
    Federation::new(init, a.server, a.clients, cfg, 0.05, 3, seed).unwrap()
}

#[test]
fn zero_weights_reduce_to_the_baseline() {
    let mut zero = stage_cfg(TrainingMode::Uap);
    zero.alpha = 0.0;
    zero.beta = 0.0;
    let mut a = federation(mlp(false), 4, zero, 5);
    let mut b = federation(mlp(false), 4, stage_cfg(TrainingMode::SsflBaseline), 5);
    for _ in 0..3 {
        let ra = a.run_round().unwrap();
        let rb = b.run_round().unwrap();
        assert_eq!(ra, rb);
        assert_eq!(bits(a.global.params()), bits(b.global.params()));
    }
}

fn random_params(net: &Network, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = net.params().clone();
    for t in p.tensors_mut() {
        t.value_mut().data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    p
}

fn bn_net() -> Network {
    mlp(true).build(InputShape::flat(5), 3, 0).unwrap()
}

#[test]
fn aggregating_identical_models_is_identity() {
    let net = bn_net();
    let p = random_params(&net, &mut ChaCha8Rng::seed_from_u64(1));
    let out = aggregate(&[&p, &p, &p], &[0.25, 0.25, 0.5], &p).unwrap();
    assert_eq!(bits(&out), bits(&p));
}

#[test]
fn opposite_models_average_to_zero() {
    let net = bn_net();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_params(&net, &mut rng);
    let mut q = p.clone();
    q.tensors_mut().iter_mut().for_each(|t| t.value_mut().scale(-1.0));
    let prev = random_params(&net, &mut rng);
    let out = aggregate(&[&p, &q], &[0.5, 0.5], &prev).unwrap();
    for (i, t) in out.tensors().iter().enumerate() {
        if t.is_batch_norm() {
            assert_eq!(t.value(), prev.get(i).value());
        } else {
            assert!(t.value().data().iter().all(|v| *v == 0.0), "{}", t.name());
        }
    }
}

#[test]
fn weighted_average_matches_direct_sum_and_skips_batch_norm() {
    let net = bn_net();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let models: Vec<ModelParams> = (0..3).map(|_| random_params(&net, &mut rng)).collect();
    let prev = random_params(&net, &mut rng);
    let w = [0.2, 0.3, 0.5];
    let refs: Vec<&ModelParams> = models.iter().collect();
    let out = aggregate(&refs, &w, &prev).unwrap();
    let mut saw_bn = false;
    for (i, t) in out.tensors().iter().enumerate() {
        for (e, v) in t.value().data().iter().enumerate() {
            if t.is_batch_norm() {
                saw_bn = true;
                assert_eq!(*v, prev.get(i).value().data()[e]);
            } else {
                let want: f64 = (0..3).map(|m| w[m] * models[m].get(i).value().data()[e]).sum();
                assert!((v - want).abs() <= 1e-12);
            }
        }
    }
    assert!(saw_bn);
    let perm = [&models[2], &models[0], &models[1]];
    let permuted = aggregate(&perm, &[0.5, 0.2, 0.3], &prev).unwrap();
    assert_eq!(bits(&permuted), bits(&out));
}

#[test]
fn aggregation_errors() {
    let net = bn_net();
    let p = net.params().clone();
    assert!(aggregate(&[&p, &p], &[0.5, 0.6], &p).is_err());
    assert!(aggregate(&[], &[], &p).is_err());
    assert!(aggregate(&[&p], &[0.5, 0.5], &p).is_err());
    let other = mlp(true).build(InputShape::flat(4), 3, 0).unwrap();
    assert!(aggregate(&[other.params()], &[1.0], &p).is_err());
}

#[test]
fn no_clients_means_the_server_output_is_global() {
    let mut fed = federation(mlp(false), 2, stage_cfg(TrainingMode::Uap), 1);
    assert!(fed.clients.is_empty());
    let report = fed.run_round().unwrap();
    assert!(report.clients.is_empty());
    assert_eq!(report.bytes, 0);
    assert_eq!(bits(fed.global.params()), bits(fed.server.net.params()));
}

#[test]
fn repeated_rounds_are_bit_identical() {
    let run = || {
        let mut fed = federation(mlp(true), 4, stage_cfg(TrainingMode::Uap), 9);
        fed.run_round().unwrap();
        bits(fed.global.params())
    };
    assert_eq!(run(), run());
}

#[test]
fn thread_count_does_not_change_results() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut fed = federation(mlp(true), 6, stage_cfg(TrainingMode::Uap), 4);
            fed.run_round().unwrap();
            fed.run_round().unwrap();
            bits(fed.global.params())
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn batch_norm_tensors_come_from_the_broadcast_model() {
    let mut fed = federation(mlp(true), 4, stage_cfg(TrainingMode::Uap), 3);
    fed.run_round().unwrap();
    let server = fed.server.net.params();
    let mut checked = 0;
    for (g, s) in fed.global.params().tensors().iter().zip(server.tensors()) {
        if g.is_batch_norm() {
            assert_eq!(g.value(), s.value(), "{}", g.name());
            checked += 1;
        }
    }
    assert!(checked > 0);
    for c in &fed.clients {
        for (ct, gt) in c.net.params().tensors().iter().zip(fed.global.params().tensors()) {
            if ct.is_batch_norm() && ct.trainable() {
                assert_ne!(ct.value(), gt.value(), "client {} keeps its own {}", c.id, ct.name());
            }
        }
    }
}

#[test]
fn uap_and_baseline_ledgers_are_identical() {
    for arch in [mlp(false), mlp(true)] {
        let mut a = federation(arch, 5, stage_cfg(TrainingMode::Uap), 0);
        let mut b = federation(arch, 5, stage_cfg(TrainingMode::SsflBaseline), 0);
        for _ in 0..2 {
            a.run_round().unwrap();
            b.run_round().unwrap();
        }
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.ledger.messages.len(), 2 * 2 * 3);
        let scalars = a.global.params().scalar_count();
        assert!(a.ledger.messages.iter().all(|m| m.scalar_count == scalars));
        assert_eq!(a.ledger.total_bytes(), a.ledger.messages.iter().map(|m| m.byte_count).sum::<usize>());
    }
}

#[test]
fn client_stage_never_reads_true_labels() {
    let a = assigned(4);
    let init = mlp(false).build(a.server.input_shape(), 3, 0).unwrap();
    let mut c = ClientState::new(0, a.clients[0].clone(), &init);
    assert!(c.data.labels().is_err());
    let opt = OptimizerState::new(0.05, 3);
    client_stage(&mut c, init.params(), &stage_cfg(TrainingMode::Uap), &opt, 1).unwrap();
    assert_eq!(c.data.diagnostic_reads(), 0);

    let mut fed = federation(mlp(false), 4, stage_cfg(TrainingMode::Uap), 0);
    fed.run_round().unwrap();
    // One read per client per round, for the reported pseudo-label accuracy.
    assert!(fed.clients.iter().all(|c| c.data.diagnostic_reads() == 1));
}

fn features_by_class(net: &Network, data: &DomainDataset, labels: &[usize], k: usize) -> Vec<f64> {
    let z = net.features(data.examples()).unwrap();
    let rows: Vec<&[f64]> = z.iter_rows().zip(labels).filter(|(_, &l)| l == k).map(|(r, _)| r).collect();
    let m = z.row_len();
    (0..m).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn injected_labels_match_supervised_training() {
    let a = assigned(4);
    let init = mlp(false).build(a.server.input_shape(), 3, 1).unwrap();
    let truth = a.clients[0].diagnostic_labels().to_vec();
    let mut cfg = stage_cfg(TrainingMode::Uap);
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    let opt = OptimizerState::new(0.05, 3);
    let mut c = ClientState::new(0, a.clients[0].clone(), &init);
    client_stage_with_labels(&mut c, init.params(), &truth, &cfg, &opt, 8).unwrap();
    let mut visible = a.clients[0].clone();
    visible.set_labels_visible(true);
    let mut s = ServerState {
        net: init.clone(),
        data: visible,
        opt: opt.clone(),
    };
    server_stage(&mut s, &cfg, 8).unwrap();
    assert_eq!(bits(c.net.params()), bits(s.net.params()));
}

#[test]
fn server_loss_falls_within_one_epoch() {
    let domains = make_blob_domains(&BlobSpec {
        classes: 2,
        dims: 4,
        domains: 1,
        n_per_class: 2000,
        class_sep: 4.0,
        noise: 0.5,
        seed: 1,
        ..BlobSpec::default()
    })
    .unwrap();
    for seed in 0..3 {
        let init = mlp(false).build(InputShape::flat(4), 2, seed).unwrap();
        let mut s = ServerState {
            net: init,
            data: domains[0].clone(),
            opt: OptimizerState::new(0.002, 1),
        };
        let cfg = StageConfig {
            local_epochs: 1,
            ..StageConfig::default()
        };
        let trace = server_stage(&mut s, &cfg, seed).unwrap();
        let q = trace.batches.len() / 4;
        let mean = |b: &[uap::federation::BatchLoss]| b.iter().map(|x| x.total).sum::<f64>() / b.len() as f64;
        let (first, last) = (mean(&trace.batches[..q]), mean(&trace.batches[trace.batches.len() - q..]));
        assert!(last < first, "seed {seed}: first quarter {first}, last quarter {last}");
        assert_eq!(trace.cdd_skips(), 0);
    }
}

#[test]
fn server_alignment_raises_feature_to_anchor_cosine() {
    let a = assigned_sized(3, 300);
    let labels = a.server.labels().unwrap().to_vec();
    let mut improved = 0;
    for seed in 0..3 {
        let init = mlp(false).build(a.server.input_shape(), 3, seed).unwrap();
        let score = |net: &Network| -> f64 {
            (0..3)
                .map(|k| cosine(&features_by_class(net, &a.server, &labels, k), &net.params().classifier_column(k)))
                .sum::<f64>()
                / 3.0
        };
        let before = score(&init);
        let mut s = ServerState {
            net: init,
            data: a.server.clone(),
            opt: OptimizerState::new(0.002, 1),
        };
        server_stage(&mut s, &StageConfig::default(), seed).unwrap();
        let after = score(&s.net);
        if after > before {
            improved += 1;
        }
    }
    assert_eq!(improved, 3);
}

fn trained_server(a: &AssignedDomains, seed: u64) -> Network {
    let init = mlp(false).build(a.server.input_shape(), 3, seed).unwrap();
    let mut s = ServerState {
        net: init,
        data: a.server.clone(),
        opt: OptimizerState::new(0.002, 1),
    };
    let mut cfg = stage_cfg(TrainingMode::SsflBaseline);
    cfg.local_epochs = 10;
    server_stage(&mut s, &cfg, seed).unwrap();
    s.net
}

#[test]
fn client_on_the_server_domain_keeps_or_improves_pseudo_labels() {
    let a = assigned_sized(3, 300);
    let (mut before, mut after) = (0.0, 0.0);
    for seed in 0..3 {
        let global = trained_server(&a, seed);
        let mut c = ClientState::new(0, a.server.clone().hidden(), &global);
        let opt = OptimizerState::new(0.002, 1);
        client_stage(&mut c, global.params(), &StageConfig::default(), &opt, seed).unwrap();
        let truth = c.data.diagnostic_labels().to_vec();
        before += pseudo_label_accuracy(c.pseudo.as_ref().unwrap(), &truth).unwrap();
        after += pseudo_label_accuracy(&generate_pseudo_labels(&c.net, c.data.examples()).unwrap(), &truth).unwrap();
    }
    assert!(after >= before, "pseudo-label accuracy {before} -> {after} (sum over seeds)");
}

#[test]
fn client_stage_keeps_nearest_anchor_for_most_classes() {
    let a = assigned(4);
    let labels = a.server.labels().unwrap().to_vec();
    let global = trained_server(&a, 0);
    let nearest = |w: &Network, mean: &[f64]| -> usize {
        (0..3)
            .map(|k| {
                let col = w.params().classifier_column(k);
                (k, col.iter().zip(mean).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            })
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap()
            .0
    };
    let mut c = ClientState::new(0, a.clients[0].clone(), &global);
    client_stage(&mut c, global.params(), &stage_cfg(TrainingMode::Uap), &OptimizerState::new(0.05, 1), 0).unwrap();
    let kept = (0..3)
        .filter(|&k| {
            let mean = features_by_class(&global, &a.server, &labels, k);
            nearest(&global, &mean) == nearest(&c.net, &mean)
        })
        .count();
    assert!(kept * 2 > 3, "{kept}/3 classes keep their nearest classifier column");
}

#[test]
fn evaluate_cases() {
    let n = 100;
    let x = Tensor::from_rows(&(0..n).map(|i| vec![1.0, i as f64]).collect::<Vec<_>>()).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let test = DomainDataset::new("t", InputShape::flat(2), 10, x, labels).unwrap();
    let mut net = Architecture::Identity.build(InputShape::flat(2), 10, 0).unwrap();
    let w = net.params_mut().classifier_mut();
    w.fill(0.0);
    w.set2(0, 0, 1.0);
    assert_eq!(evaluate(&net, &test).unwrap(), 0.10);

    // One-hot inputs mapped through the identity classifier reproduce the labels.
    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..10).map(|c| if c == i % 10 { 1.0 } else { 0.0 }).collect()).collect();
    let own = DomainDataset::new("own", InputShape::flat(10), 10, Tensor::from_rows(&rows).unwrap(), (0..n).map(|i| i % 10).collect()).unwrap();
    let mut memo = Architecture::Identity.build(InputShape::flat(10), 10, 0).unwrap();
    *memo.params_mut().classifier_mut() = Tensor::identity(10);
    assert_eq!(evaluate(&memo, &own).unwrap(), 1.0);

    assert!(DomainDataset::new("empty", InputShape::flat(2), 10, Tensor::zeros(&[0, 2]), vec![]).is_err());
}

#[test]
fn random_cnn_is_near_chance_on_rotated_digits() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let dir = std::env::var_os("UAP_MNIST_DIR").map(std::path::PathBuf::from).unwrap_or(dir);
    let (_, test) = load_mnist_splits(&dir).expect("bundled MNIST under data/mnist");
    let domain = rotate_domain(&test, 30.0, 500, 0).unwrap();
    for seed in 0..5 {
        let net = Architecture::default().build(domain.input_shape(), 10, seed).unwrap();
        let acc = evaluate(&net, &domain).unwrap();
        assert!((0.02..=0.25).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn train_mode_forward_leaves_no_trace_in_evaluation() {
    let a = assigned(3);
    let mut net = mlp(false).build(a.server.input_shape(), 3, 0).unwrap();
    let before = evaluate(&net, &a.test).unwrap();
    net.forward_features(a.server.examples(), Mode::Train).unwrap();
    assert_eq!(evaluate(&net, &a.test).unwrap(), before);
}
