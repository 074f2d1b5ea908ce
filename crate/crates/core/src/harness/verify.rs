//! Self-checks behind `uap verify`: gradients, oracle equivalence,
//! aggregation invariants and the communication-overhead audit.

use std::collections::BTreeMap;

use rand::Rng;

use crate::alignlosses::{
    cdd_loss, cdd_loss_with_bandwidths, cov_loss, cov_loss_against, cross_entropy, mmd_pair, mmd_pair_with_bandwidth,
    offdiag_cov_loss, CddConfig, CovConfig, KernelConfig,
};
use crate::datagen::{make_blob_domains, BlobSpec, DomainDataset};
use crate::featdist::{compute_overhead, sample_class_features, GaussianClassBank, RESNET50_PARAM_COUNT};
use crate::federation::{aggregate, CommLedger, Federation, StageConfig, TrainingMode};
use crate::nncore::gradcheck::{check_network_gradients, finite_difference, max_relative_error, GradCheckOptions};
use crate::nncore::{Architecture, InputShape, Mode, ModelParams, Network, NnError, Tensor};
use crate::pseudolabel::pseudo_labels_from_features;
use crate::seeding::rng_for;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Scale the analytic gradient of this layer (e.g. `conv0`) by 1.5.
    pub fault_layer: Option<String>,
    /// Random instances per property.
    pub instances: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

fn random_class_sets(rng: &mut impl Rng, classes: usize, m: usize) -> (BTreeMap<usize, Tensor>, BTreeMap<usize, Tensor>) {
    let mut f = BTreeMap::new();
    let mut t = BTreeMap::new();
    for k in 0..classes {
        let (a, b) = (rng.random_range(1..5), rng.random_range(1..5));
        f.insert(k, random_tensor(rng, a, m, 1.5));
        t.insert(k, random_tensor(rng, b, m, 1.5));
    }
    (f, t)
}

/// Finite-difference checks of every loss on `n` random 3–8 dimensional
/// instances; returns the worst relative error per loss.
pub fn loss_gradient_errors(n: usize, seed: u64) -> BTreeMap<&'static str, f64> {
    let mut rng = rng_for(&[seed, 0x6772]);
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    let h = crate::nncore::gradcheck::DEFAULT_STEP;
    for _ in 0..n {
        let m = rng.random_range(3..=8);
        let rows = rng.random_range(3..=8);

        let logits = random_tensor(&mut rng, rows, m, 3.0);
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..m)).collect();
        let ce = cross_entropy(&logits, &targets).expect("valid");
        let fd = finite_difference(
            |x| cross_entropy(&Tensor::new(vec![rows, m], x.to_vec()).unwrap(), &targets).unwrap().value,
            logits.data(),
            h,
        );
        note("cross_entropy", max_relative_error(ce.grad.data(), &fd));

        let a = random_tensor(&mut rng, rows, m, 1.0);
        let nb = rng.random_range(2..=8);
        let b = random_tensor(&mut rng, nb, m, 1.0);
        let v = mmd_pair(&a, &b, &KernelConfig::default()).expect("valid");
        let mults = KernelConfig::default().multipliers;
        let fd_a = finite_difference(
            |x| {
                let a2 = Tensor::new(a.shape().to_vec(), x.to_vec()).unwrap();
                mmd_pair_with_bandwidth(&a2, &b, &mults, v.sigma2).unwrap().value
            },
            a.data(),
            h,
        );
        let fd_b = finite_difference(
            |x| {
                let b2 = Tensor::new(b.shape().to_vec(), x.to_vec()).unwrap();
                mmd_pair_with_bandwidth(&a, &b2, &mults, v.sigma2).unwrap().value
            },
            b.data(),
            h,
        );
        note(
            "mmd",
            max_relative_error(v.grad_a.data(), &fd_a).max(max_relative_error(v.grad_b.data(), &fd_b)),
        );

        let classes = rng.random_range(2..=4);
        let (f, t) = random_class_sets(&mut rng, classes, m);
        let cdd = cdd_loss(&f, &t, &CddConfig::default()).expect("valid");
        let mut e = 0.0f64;
        for k in 0..classes {
            let fd = finite_difference(
                |x| {
                    let mut f2 = f.clone();
                    f2.insert(k, Tensor::new(f[&k].shape().to_vec(), x.to_vec()).unwrap());
                    cdd_loss_with_bandwidths(&f2, &t, &mults, &cdd.bandwidths).unwrap().value
                },
                f[&k].data(),
                h,
            );
            e = e.max(max_relative_error(cdd.feature_grads[&k].data(), &fd));
        }
        note("cdd", e);

        let z = random_tensor(&mut rng, rows, m, 1.5);
        let reference: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.5)).collect();
        let cov = cov_loss_against(&z, &reference).expect("valid");
        let fd = finite_difference(
            |x| cov_loss_against(&Tensor::new(vec![rows, m], x.to_vec()).unwrap(), &reference).unwrap().value,
            z.data(),
            h,
        );
        note("cov", max_relative_error(cov.grad.data(), &fd));
        let off = offdiag_cov_loss(&z).expect("valid");
        let fd = finite_difference(
            |x| offdiag_cov_loss(&Tensor::new(vec![rows, m], x.to_vec()).unwrap()).unwrap().value,
            z.data(),
            h,
        );
        note("offdiag_cov", max_relative_error(off.grad.data(), &fd));
    }
    worst
}

fn nn_err(e: impl std::fmt::Display) -> NnError {
    NnError::InvalidArgument(e.to_string())
}

/// `CE + CDD + COV` on a network, with fixed Gaussian targets and a fixed
/// kernel bandwidth so the loss is a smooth function of the parameters.
pub fn composite_alignment_loss(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    targets: &BTreeMap<usize, Tensor>,
    backprop: bool,
) -> Result<f64, NnError> {
    let z = net.forward_features(x, Mode::Train)?;
    let logits = net.classify(&z)?;
    let ce = cross_entropy(&logits, labels).map_err(nn_err)?;
    let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        rows.entry(l).or_default().push(i);
    }
    let feats: BTreeMap<usize, Tensor> = rows.iter().map(|(&k, r)| (k, z.select_rows(r))).collect();
    let cdd_cfg = CddConfig {
        kernel: KernelConfig::fixed(2.0),
        ..CddConfig::default()
    };
    let cdd = cdd_loss(&feats, targets, &cdd_cfg).map_err(nn_err)?;
    let cov = cov_loss(&z, &CovConfig::default()).map_err(nn_err)?;
    if backprop {
        let mut dz = net.classify_backward(&z, &ce.grad)?;
        for (k, r) in &rows {
            for (j, &i) in r.iter().enumerate() {
                for (d, g) in dz.row_mut(i).iter_mut().zip(cdd.feature_grads[k].row(j)) {
                    *d += g;
                }
            }
        }
        dz.add_scaled(&cov.grad, 1.0);
        net.backward(&dz)?;
    } else {
        net.clear_cache();
    }
    Ok(ce.value + cdd.value + cov.value)
}

/// Small networks covering every layer type, each with a matching batch.
pub fn gradcheck_networks(seed: u64) -> Vec<(String, Network, Tensor, Vec<usize>)> {
    use crate::nncore::LayerSpec::*;
    let mut rng = rng_for(&[seed, 0x6c61]);
    let specs = [
        (
            "mlp-bn",
            InputShape::flat(5),
            vec![
                Dense { outputs: 6, bias: true },
                BatchNorm,
                Relu,
                Dense { outputs: 4, bias: true },
                Relu,
            ],
        ),
        (
            "cnn-bn",
            InputShape::image(2, 10, 10),
            vec![
                Conv2d { out_channels: 3, kernel: 3 },
                BatchNorm,
                Relu,
                MaxPool2,
                Conv2d { out_channels: 4, kernel: 2 },
                Relu,
                MaxPool2,
                Dense { outputs: 4, bias: true },
                BatchNorm,
                Relu,
            ],
        ),
    ];
    specs
        .into_iter()
        .map(|(name, input, layers)| {
            let net = Network::new(input, &layers, 3, rng.random()).expect("valid layers");
            let x = random_tensor(&mut rng, 6, input.len(), 1.0);
            (name.to_string(), net, x, vec![0, 1, 2, 0, 1, 2])
        })
        .collect()
}

/// Per-network, per-layer worst relative errors of the composite loss.
pub fn layer_gradient_errors(seed: u64, opts: &GradCheckOptions) -> Result<Vec<(String, String, f64)>, NnError> {
    let mut out = Vec::new();
    for (name, net, x, labels) in gradcheck_networks(seed) {
        let bank = GaussianClassBank::from_params(net.params(), 0.01).map_err(nn_err)?;
        let targets: BTreeMap<usize, Tensor> = (0..3)
            .map(|k| (k, sample_class_features(&bank, k, 3, seed).expect("valid class")))
            .collect();
        let errs = check_network_gradients(
            &net,
            &x,
            |n, b, bp| composite_alignment_loss(n, b, &labels, &targets, bp),
            opts,
        )?;
        out.extend(errs.into_iter().map(|e| (name.clone(), e.layer, e.max_rel_error)));
    }
    Ok(out)
}

// ---- independent oracles --------------------------------------------------

fn naive_kernel(a: &[f64], b: &[f64], sigma2: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    [0.5, 1.0, 2.0].iter().map(|c| (-d / (2.0 * c * sigma2)).exp()).sum()
}

fn naive_median(a: &Tensor, b: &Tensor) -> f64 {
    let pts: Vec<&[f64]> = a.iter_rows().chain(b.iter_rows()).collect();
    let mut d = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(pts[i].iter().zip(pts[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { (d[n / 2 - 1] + d[n / 2]) / 2.0 };
    if med > 1e-12 {
        med
    } else {
        1.0
    }
}

fn naive_mmd(a: &Tensor, b: &Tensor) -> f64 {
    let s2 = naive_median(a, b);
    let mean = |x: &Tensor, y: &Tensor| {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                s += naive_kernel(x.row(i), y.row(j), s2);
            }
        }
        s / (x.rows() * y.rows()) as f64
    };
    mean(a, a) + mean(b, b) - 2.0 * mean(a, b)
}

fn naive_cdd(f: &BTreeMap<usize, Tensor>, t: &BTreeMap<usize, Tensor>) -> f64 {
    let c = f.len() as f64;
    let (mut intra, mut inter) = (0.0, 0.0);
    for (k1, a) in f {
        for (k2, b) in t {
            if k1 == k2 {
                intra += naive_mmd(a, b);
            } else {
                inter += naive_mmd(a, b);
            }
        }
    }
    intra / c - inter / (c * (c - 1.0))
}

/// Straight two-pass nearest-centroid labelling (cosine distance).
pub fn naive_two_pass_labels(z: &Tensor, probs: &Tensor) -> Vec<usize> {
    let (n, k) = (z.rows(), probs.shape()[1]);
    let m = z.shape()[1];
    let centroid = |w: &dyn Fn(usize, usize) -> f64, prior: Option<&Vec<Vec<f64>>>| {
        let mut cs = Vec::new();
        for j in 0..k {
            let mut c = vec![0.0; m];
            let mut mass = 0.0;
            for i in 0..n {
                let wij = w(i, j);
                if wij == 0.0 {
                    continue;
                }
                mass += wij;
                for d in 0..m {
                    c[d] += wij * z.get2(i, d);
                }
            }
            if mass > 0.0 {
                c.iter_mut().for_each(|v| *v /= mass);
            } else if let Some(p) = prior {
                c = p[j].clone();
            }
            cs.push(c);
        }
        cs
    };
    let assign = |cs: &Vec<Vec<f64>>| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let zi = z.row(i);
                let mut best = (0, f64::INFINITY);
                for (j, c) in cs.iter().enumerate() {
                    let dot: f64 = zi.iter().zip(c).map(|(a, b)| a * b).sum();
                    let nz = zi.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nc = c.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let d = if nz == 0.0 || nc == 0.0 { 1.0 } else { 1.0 - dot / (nz * nc) };
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect()
    };
    let c1 = centroid(&|i, j| probs.get2(i, j), None);
    let l1 = assign(&c1);
    let c2 = centroid(&|i, j| if l1[i] == j { 1.0 } else { 0.0 }, Some(&c1));
    assign(&c2)
}

// ---- protocol checks ------------------------------------------------------

fn random_params(template: &ModelParams, rng: &mut impl Rng) -> ModelParams {
    let mut p = template.clone();
    for t in p.tensors_mut() {
        for v in t.value_mut().data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    p
}

/// Ledger of a one-round federation on tiny synthetic data.
pub fn tiny_ledger(arch: Architecture, input: InputShape, mode: TrainingMode, seed: u64) -> Result<CommLedger, String> {
    let mut rng = rng_for(&[seed, 0x6f76]);
    let classes = 3;
    let make = |id: &str, rng: &mut rand_chacha::ChaCha8Rng| {
        let n = 12;
        let x = random_tensor(rng, n, input.len(), 1.0);
        DomainDataset::new(id, input, classes, x, (0..n).map(|i| i % classes).collect()).map_err(|e| e.to_string())
    };
    let server = make("S", &mut rng)?;
    let clients = vec![make("C0", &mut rng)?, make("C1", &mut rng)?];
    let init = arch.build(input, classes, seed).map_err(|e| e.to_string())?;
    let cfg = StageConfig {
        mode,
        batch_size: 6,
        local_epochs: 1,
        ..StageConfig::default()
    };
    let mut fed = Federation::new(init, server, clients, cfg, 0.01, 2, seed).map_err(|e| e.to_string())?;
    for _ in 0..2 {
        fed.run_round().map_err(|e| e.to_string())?;
    }
    Ok(fed.ledger)
}

/// Runs every property and collects pass/fail lines.
pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let n = opts.instances.unwrap_or(20);
    let mut report = VerifyReport::default();

    for (loss, err) in loss_gradient_errors(n, 1) {
        report.push(format!("gradient/{loss}"), err <= GRAD_TOLERANCE, format!("max rel err {err:.3e}"));
    }
    let gc = GradCheckOptions {
        fault_layer: opts.fault_layer.clone(),
        ..GradCheckOptions::default()
    };
    match layer_gradient_errors(2, &gc) {
        Ok(errs) => {
            for (net, layer, e) in errs {
                report.push(
                    format!("gradient/{net}/{layer}"),
                    e <= GRAD_TOLERANCE,
                    format!("layer {layer}: max rel err {e:.3e}"),
                );
            }
        }
        Err(e) => report.push("gradient/layers", false, e.to_string()),
    }

    let mut rng = rng_for(&[3, 0x6f72]);
    let (mut mmd_err, mut cdd_err) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let m = rng.random_range(1..=8);
        let (na, nb) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = random_tensor(&mut rng, na, m, 2.0);
        let b = random_tensor(&mut rng, nb, m, 2.0);
        let v = mmd_pair(&a, &b, &KernelConfig::default()).expect("valid");
        mmd_err = mmd_err.max((v.value - naive_mmd(&a, &b)).abs());
        let classes = rng.random_range(2..=4);
        let (f, t) = random_class_sets(&mut rng, classes, m);
        let c = cdd_loss(&f, &t, &CddConfig::default()).expect("valid");
        cdd_err = cdd_err.max((c.value - naive_cdd(&f, &t)).abs());
    }
    report.push("oracle/mmd", mmd_err <= ORACLE_TOLERANCE, format!("max abs diff {mmd_err:.3e}"));
    report.push("oracle/cdd", cdd_err <= ORACLE_TOLERANCE, format!("max abs diff {cdd_err:.3e}"));

    let mut mismatches = 0;
    for _ in 0..n {
        let (rows, m, k) = (rng.random_range(1..=20), rng.random_range(2..=6), rng.random_range(2..=5));
        let z = random_tensor(&mut rng, rows, m, 1.0);
        let probs = crate::alignlosses::softmax_rows(&random_tensor(&mut rng, rows, k, 3.0));
        let got = pseudo_labels_from_features(&z, &probs, 2).expect("valid");
        if got.labels != naive_two_pass_labels(&z, &probs) {
            mismatches += 1;
        }
    }
    report.push("oracle/pseudo-labels", mismatches == 0, format!("{mismatches} mismatching instances of {n}"));

    let template = Architecture::Mlp {
        hidden: 5,
        features: 4,
        batch_norm: true,
    }
    .build(InputShape::flat(3), 3, 9)
    .expect("valid")
    .params()
    .clone();
    let models: Vec<ModelParams> = (0..3).map(|_| random_params(&template, &mut rng)).collect();
    let prev = random_params(&template, &mut rng);
    let w = [0.2, 0.3, 0.5];
    let fwd = aggregate(&[&models[0], &models[1], &models[2]], &w, &prev);
    let rev = aggregate(&[&models[2], &models[0], &models[1]], &[0.5, 0.2, 0.3], &prev);
    match (fwd, rev) {
        (Ok(a), Ok(b)) => {
            let perm = a.tensors().iter().zip(b.tensors()).all(|(x, y)| x.value() == y.value());
            report.push("aggregate/permutation-invariance", perm, "bitwise equal under reordering");
            let bn_ok = a
                .tensors()
                .iter()
                .zip(prev.tensors())
                .filter(|(t, _)| t.is_batch_norm())
                .all(|(t, p)| t.value() == p.value());
            report.push("aggregate/bn-skip", bn_ok, "batch-norm tensors equal prev_global");
            let mut worst = 0.0f64;
            for (i, t) in a.tensors().iter().enumerate().filter(|(_, t)| !t.is_batch_norm()) {
                for (e, v) in t.value().data().iter().enumerate() {
                    let want: f64 = (0..3).map(|j| w[j] * models[j].get(i).value().data()[e]).sum();
                    worst = worst.max((v - want).abs());
                }
            }
            report.push("aggregate/weighted-mean", worst <= 1e-12, format!("max abs diff {worst:.3e}"));
        }
        (Err(e), _) | (_, Err(e)) => report.push("aggregate", false, e.to_string()),
    }

    let archs = [
        (
            "mlp",
            Architecture::Mlp {
                hidden: 16,
                features: 8,
                batch_norm: false,
            },
            InputShape::flat(10),
        ),
        ("cnn", Architecture::default(), InputShape::image(1, 28, 28)),
    ];
    for (name, arch, input) in archs {
        let uap = tiny_ledger(arch, input, TrainingMode::Uap, 4);
        let base = tiny_ledger(arch, input, TrainingMode::SsflBaseline, 4);
        match (uap, base) {
            (Ok(u), Ok(b)) => {
                let same = u.messages == b.messages;
                report.push(
                    format!("overhead/ledger-{name}"),
                    same,
                    format!("uap {} bytes vs baseline {} bytes", u.total_bytes(), b.total_bytes()),
                );
            }
            (Err(e), _) | (_, Err(e)) => report.push(format!("overhead/ledger-{name}"), false, e),
        }
    }
    let r = compute_overhead(1000, 2048, RESNET50_PARAM_COUNT);
    report.push(
        "overhead/resnet50-ratio",
        (150.0..=185.0).contains(&r.ratio),
        format!("{} scalars, ratio {:.1}", r.scalars_avoided, r.ratio),
    );
    report
}

/// Blob data used by quick demonstrations.
pub fn demo_blobs() -> Vec<DomainDataset> {
    make_blob_domains(&BlobSpec::default()).expect("valid spec")
}
