use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::nncore::gradcheck::{finite_difference, max_relative_error, DEFAULT_STEP};
use crate::seeding::rng_for;

fn random_tensor(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = rng_for(&[seed]);
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

// ---- independent oracles -------------------------------------------------

fn oracle_kernel(a: &[f64], b: &[f64], mults: &[f64], sigma2: f64) -> f64 {
    let mut d2 = 0.0;
    for i in 0..a.len() {
        d2 += (a[i] - b[i]).powi(2);
    }
    mults.iter().map(|c| (-d2 / (2.0 * c * sigma2)).exp()).sum()
}

fn oracle_mmd(a: &Tensor, b: &Tensor, mults: &[f64], sigma2: f64) -> f64 {
    let (n1, n2) = (a.rows() as f64, b.rows() as f64);
    let mut xx = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.rows() {
            xx += oracle_kernel(a.row(i), a.row(j), mults, sigma2) / (n1 * n1);
        }
    }
    let mut yy = 0.0;
    for i in 0..b.rows() {
        for j in 0..b.rows() {
            yy += oracle_kernel(b.row(i), b.row(j), mults, sigma2) / (n2 * n2);
        }
    }
    let mut xy = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            xy += oracle_kernel(a.row(i), b.row(j), mults, sigma2) / (n1 * n2);
        }
    }
    xx + yy - 2.0 * xy
}

fn oracle_median_sq_dist(points: &[&[f64]]) -> f64 {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in 0..points.len() {
            if i < j {
                d.push(points[i].iter().zip(points[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>());
            }
        }
    }
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        (d[n / 2 - 1] + d[n / 2]) / 2.0
    }
}

fn oracle_median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let pts: Vec<&[f64]> = a.iter_rows().chain(b.iter_rows()).collect();
    oracle_median_sq_dist(&pts)
}

/// Straight-from-the-formula CDD using the median bandwidth per pair.
fn oracle_cdd(f: &BTreeMap<usize, Tensor>, t: &BTreeMap<usize, Tensor>, mults: &[f64]) -> f64 {
    let classes: Vec<usize> = f.keys().copied().collect();
    let c = classes.len() as f64;
    let mut intra = 0.0;
    let mut inter = 0.0;
    for &k1 in &classes {
        for &k2 in &classes {
            let s2 = oracle_median_bandwidth(&f[&k1], &t[&k2]);
            let v = oracle_mmd(&f[&k1], &t[&k2], mults, s2);
            if k1 == k2 {
                intra += v;
            } else {
                inter += v;
            }
        }
    }
    intra / c - inter / (c * (c - 1.0))
}

fn oracle_cov(z: &Tensor) -> Vec<Vec<f64>> {
    let (n, m) = (z.rows(), z.shape()[1]);
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            mean[j] += z.get2(i, j) / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in 0..m {
            for i in 0..n {
                cov[a][b] += (z.get2(i, a) - mean[a]) * (z.get2(i, b) - mean[b]);
            }
            cov[a][b] /= (n - 1) as f64;
        }
    }
    cov
}

// ---- cross-entropy -------------------------------------------------------

#[test]
fn cross_entropy_uniform_logits_is_ln_k() {
    let ce = cross_entropy(&Tensor::zeros(&[3, 10]), &[0, 4, 9]).unwrap();
    assert!((ce.value - 10f64.ln()).abs() < 1e-12);
    assert!((ce.value - 2.302585).abs() < 1e-6);
}

#[test]
fn cross_entropy_confident_correct_is_tiny() {
    let mut logits = Tensor::zeros(&[2, 10]);
    logits.set2(0, 3, 50.0);
    logits.set2(1, 7, 50.0);
    let ce = cross_entropy(&logits, &[3, 7]).unwrap();
    assert!(ce.value >= 0.0 && ce.value < 1e-20, "{}", ce.value);
}

#[test]
fn cross_entropy_matches_direct_softmax() {
    let logits = random_tensor(4, 3, 31, 3.0);
    let targets = [2, 0, 1, 1];
    let ce = cross_entropy(&logits, &targets).unwrap();
    let mut expected = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected -= (row[t].exp() / z).ln() / 4.0;
        for j in 0..3 {
            let p = row[j].exp() / z;
            let want = (p - if j == t { 1.0 } else { 0.0 }) / 4.0;
            assert!((ce.grad.get2(i, j) - want).abs() < 1e-12);
        }
    }
    assert!((ce.value - expected).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let err = cross_entropy(&Tensor::zeros(&[2, 3]), &[0, 3]).unwrap_err();
    assert_eq!(
        err,
        LossError::TargetOutOfRange {
            row: 1,
            target: 3,
            classes: 3
        }
    );
}

// ---- kernel & MMD --------------------------------------------------------

#[test]
fn rbf_kernel_cases() {
    let cfg = KernelConfig::default();
    assert!((rbf_kernel(&[1.0, 2.0], &[1.0, 2.0], &cfg, 0.7) - 3.0).abs() < 1e-15);
    let single = KernelConfig {
        multipliers: vec![1.0],
        bandwidth: Bandwidth::Fixed(0.5),
    };
    // ‖a−b‖² = 1 = 2σ² → exp(−1)
    let v = rbf_kernel(&[0.0, 0.0], &[1.0, 0.0], &single, 0.5);
    assert!((v - (-1f64).exp()).abs() < 1e-15);
    assert!((v - 0.367879).abs() < 1e-6);
}

#[test]
fn median_heuristic_matches_brute_force() {
    let pts: Vec<Vec<f64>> = vec![
        vec![0.0, 0.0],
        vec![1.0, 0.5],
        vec![-2.0, 1.0],
        vec![3.0, -1.0],
        vec![0.5, 2.5],
    ];
    let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
    let want = oracle_median_sq_dist(&refs);
    assert_eq!(median_pairwise_sq_distance(refs.iter().copied()), Some(want));
    let a = Tensor::from_rows(&pts[..2]).unwrap();
    let b = Tensor::from_rows(&pts[2..]).unwrap();
    assert_eq!(base_bandwidth(&a, &b, &KernelConfig::default()), want);
}

#[test]
fn mmd_identical_sets_is_zero() {
    let a = random_tensor(5, 4, 1, 2.0);
    let v = mmd_pair(&a, &a, &KernelConfig::default()).unwrap();
    assert!(v.value.abs() < 1e-12);
}

#[test]
fn mmd_singletons_is_two_minus_two_k() {
    let a = Tensor::from_rows(&[vec![0.3, -1.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![1.1, 0.4]]).unwrap();
    let cfg = KernelConfig {
        multipliers: vec![1.0],
        bandwidth: Bandwidth::Fixed(0.8),
    };
    let v = mmd_pair(&a, &b, &cfg).unwrap();
    let k = rbf_kernel(a.row(0), b.row(0), &cfg, 0.8);
    assert!((v.value - (2.0 - 2.0 * k)).abs() < 1e-14);
}

#[test]
fn mmd_matches_double_loop_oracle() {
    let a = random_tensor(6, 3, 2, 1.5);
    let b = random_tensor(7, 3, 3, 1.5);
    let cfg = KernelConfig::default();
    let v = mmd_pair(&a, &b, &cfg).unwrap();
    let s2 = oracle_median_bandwidth(&a, &b);
    assert!((v.sigma2 - s2).abs() < 1e-14);
    assert!((v.value - oracle_mmd(&a, &b, &cfg.multipliers, s2)).abs() < 1e-10);
}

#[test]
fn mmd_rejects_empty_set() {
    let a = random_tensor(2, 3, 2, 1.0);
    let empty = Tensor::zeros(&[0, 3]);
    assert!(matches!(mmd_pair(&a, &empty, &KernelConfig::default()), Err(LossError::EmptySet(_))));
}

#[test]
fn mmd_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let (n1, n2, m) = (3 + seed as usize % 4, 2 + seed as usize % 5, 3 + seed as usize % 6);
        let a = random_tensor(n1, m, 1000 + seed, 1.0);
        let b = random_tensor(n2, m, 2000 + seed, 1.0);
        let v = mmd_pair(&a, &b, &KernelConfig::default()).unwrap();
        let mults = KernelConfig::default().multipliers;
        let fd_a = finite_difference(
            |x| {
                let a2 = Tensor::new(vec![n1, m], x.to_vec()).unwrap();
                mmd_pair_with_bandwidth(&a2, &b, &mults, v.sigma2).unwrap().value
            },
            a.data(),
            DEFAULT_STEP,
        );
        let fd_b = finite_difference(
            |x| {
                let b2 = Tensor::new(vec![n2, m], x.to_vec()).unwrap();
                mmd_pair_with_bandwidth(&a, &b2, &mults, v.sigma2).unwrap().value
            },
            b.data(),
            DEFAULT_STEP,
        );
        assert!(max_relative_error(v.grad_a.data(), &fd_a) <= 1e-4);
        assert!(max_relative_error(v.grad_b.data(), &fd_b) <= 1e-4);
    }
}

// ---- CDD -----------------------------------------------------------------

fn class_maps(classes: &[usize], n: usize, m: usize, seed: u64, spread: f64) -> (BTreeMap<usize, Tensor>, BTreeMap<usize, Tensor>) {
    let mut f = BTreeMap::new();
    let mut t = BTreeMap::new();
    for (i, &k) in classes.iter().enumerate() {
        let mut fk = random_tensor(n, m, seed + 10 * i as u64, 1.0);
        let mut tk = random_tensor(n + 1, m, seed + 10 * i as u64 + 5, 1.0);
        for v in fk.data_mut().iter_mut().chain(tk.data_mut().iter_mut()) {
            *v += spread * k as f64;
        }
        f.insert(k, fk);
        t.insert(k, tk);
    }
    (f, t)
}

#[test]
fn cdd_identical_everything_is_zero() {
    let pts = random_tensor(4, 3, 9, 1.0);
    let f: BTreeMap<_, _> = [(0, pts.clone()), (1, pts.clone()), (2, pts.clone())].into();
    let v = cdd_loss(&f, &f.clone(), &CddConfig::default()).unwrap();
    assert!(v.intra.abs() < 1e-12 && v.inter.abs() < 1e-12 && v.value.abs() < 1e-12);
}

#[test]
fn cdd_matched_classes_is_minus_mean_inter() {
    let (f, _) = class_maps(&[0, 1, 2], 4, 3, 50, 2.0);
    let v = cdd_loss(&f, &f.clone(), &CddConfig::default()).unwrap();
    let mults = KernelConfig::default().multipliers;
    let mut inter = 0.0;
    for k1 in 0..3 {
        for k2 in 0..3 {
            if k1 != k2 {
                let s2 = oracle_median_bandwidth(&f[&k1], &f[&k2]);
                inter += oracle_mmd(&f[&k1], &f[&k2], &mults, s2);
            }
        }
    }
    inter /= 6.0;
    assert!(v.intra.abs() < 1e-12);
    assert!((v.value + inter).abs() < 1e-10);
}

#[test]
fn cdd_matches_formula_oracle() {
    let (f, t) = class_maps(&[1, 4, 7], 5, 4, 70, 0.8);
    let cfg = CddConfig::default();
    let v = cdd_loss(&f, &t, &cfg).unwrap();
    assert!((v.value - oracle_cdd(&f, &t, &cfg.kernel.multipliers)).abs() < 1e-10);
}

#[test]
fn cdd_requires_two_classes_and_matching_keys() {
    let (f, t) = class_maps(&[0], 3, 2, 1, 1.0);
    assert_eq!(cdd_loss(&f, &t, &CddConfig::default()).unwrap_err(), LossError::TooFewClasses(1));
    let (f, _) = class_maps(&[0, 1], 3, 2, 1, 1.0);
    let (_, t) = class_maps(&[0, 2], 3, 2, 1, 1.0);
    assert!(matches!(cdd_loss(&f, &t, &CddConfig::default()), Err(LossError::ShapeMismatch(_))));
}

#[test]
fn cdd_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let m = 3 + seed as usize % 6;
        let (f, t) = class_maps(&[0, 1, 2], 2 + seed as usize % 3, m, 300 + seed, 0.7);
        let v = cdd_loss(&f, &t, &CddConfig::default()).unwrap();
        let mults = CddConfig::default().kernel.multipliers;
        for &k in f.keys() {
            let fd = finite_difference(
                |x| {
                    let mut f2 = f.clone();
                    f2.insert(k, Tensor::new(f[&k].shape().to_vec(), x.to_vec()).unwrap());
                    cdd_loss_with_bandwidths(&f2, &t, &mults, &v.bandwidths).unwrap().value
                },
                f[&k].data(),
                DEFAULT_STEP,
            );
            assert!(max_relative_error(v.feature_grads[&k].data(), &fd) <= 1e-4);
            let fd_t = finite_difference(
                |x| {
                    let mut t2 = t.clone();
                    t2.insert(k, Tensor::new(t[&k].shape().to_vec(), x.to_vec()).unwrap());
                    cdd_loss_with_bandwidths(&f, &t2, &mults, &v.bandwidths).unwrap().value
                },
                t[&k].data(),
                DEFAULT_STEP,
            );
            assert!(max_relative_error(v.target_grads[&k].data(), &fd_t) <= 1e-4);
        }
    }
}

#[test]
fn cdd_decreases_as_features_move_to_target_means() {
    for seed in 0..10u64 {
        let mut rng = rng_for(&[seed, 77]);
        let m = 4;
        let classes = [0usize, 1, 2];
        let mut targets = BTreeMap::new();
        let mut feats = BTreeMap::new();
        for &k in &classes {
            let center: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut tk = Tensor::zeros(&[6, m]);
            let mut fk = Tensor::zeros(&[6, m]);
            for i in 0..6 {
                for j in 0..m {
                    tk.set2(i, j, center[j] + 0.1 * rng.random_range(-1.0..1.0));
                    fk.set2(i, j, center[j] + 3.0 + rng.random_range(-1.0..1.0));
                }
            }
            targets.insert(k, tk);
            feats.insert(k, fk);
        }
        let means: BTreeMap<usize, Vec<f64>> = targets
            .iter()
            .map(|(&k, t)| (k, (0..m).map(|j| (0..6).map(|i| t.get2(i, j)).sum::<f64>() / 6.0).collect()))
            .collect();
        // The median heuristic moves with the points, so fix the bandwidth.
        let fixed = CddConfig {
            kernel: KernelConfig::fixed(4.0),
            ..CddConfig::default()
        };
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let s = step as f64 / 10.0;
            let moved: BTreeMap<usize, Tensor> = feats
                .iter()
                .map(|(&k, f)| {
                    let mut g = f.clone();
                    for i in 0..6 {
                        for j in 0..m {
                            g.set2(i, j, (1.0 - s) * f.get2(i, j) + s * means[&k][j]);
                        }
                    }
                    (k, g)
                })
                .collect();
            let v = cdd_loss(&moved, &targets, &fixed).unwrap().value;
            assert!(v < prev, "seed {seed} step {step}: {v} !< {prev}");
            prev = v;
        }
    }
}

// ---- covariance ----------------------------------------------------------

#[test]
fn covariance_cases() {
    let same = Tensor::from_rows(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
    assert!(batch_covariance(&same).unwrap().data().iter().all(|&v| v == 0.0));

    let two = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
    assert_eq!(batch_covariance(&two).unwrap().data(), &[2.0, 0.0, 0.0, 0.0]);

    let z = random_tensor(10, 4, 17, 2.0);
    let got = batch_covariance(&z).unwrap();
    let want = oracle_cov(&z);
    for a in 0..4 {
        for b in 0..4 {
            assert!((got.get2(a, b) - want[a][b]).abs() < 1e-12);
        }
    }
    assert_eq!(
        batch_covariance(&Tensor::zeros(&[1, 3])).unwrap_err(),
        LossError::TooFewRows { needed: 2, got: 1 }
    );
}

fn axis_points(r: f64) -> Tensor {
    Tensor::from_rows(&[vec![r, 0.0], vec![-r, 0.0], vec![0.0, r], vec![0.0, -r]]).unwrap()
}

#[test]
fn cov_loss_cases() {
    // covariance of the axis points is (2r²/3)·I
    let z = axis_points(1.0);
    let v = cov_loss_against(&z, &[2.0 / 3.0, 2.0 / 3.0]).unwrap();
    assert!(v.value.abs() < 1e-24);
    let z = axis_points(3f64.sqrt());
    let v = cov_loss_against(&z, &[1.0, 1.0]).unwrap();
    assert!((v.value - 1.0).abs() < 1e-12);
    // defaults γ = 100, λ = 0.01 give Σ = I
    let cfg = CovConfig::default();
    assert_eq!(cfg.reference_diagonal(3).unwrap(), Some(vec![1.0; 3]));
    assert!((cov_loss(&z, &cfg).unwrap().value - 1.0).abs() < 1e-12);
}

#[test]
fn offdiag_cov_loss_cases() {
    assert!(offdiag_cov_loss(&axis_points(2.0)).unwrap().value.abs() < 1e-24);
    let a = 1.5f64.sqrt();
    let z = Tensor::from_rows(&[vec![-a, -a], vec![a, a]]).unwrap();
    assert!((offdiag_cov_loss(&z).unwrap().value - 9.0).abs() < 1e-12);

    let z = random_tensor(7, 4, 23, 1.0);
    let cov = oracle_cov(&z);
    let mut want = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                want += cov[i][j] * cov[i][j];
            }
        }
    }
    assert!((offdiag_cov_loss(&z).unwrap().value - want / 4.0).abs() < 1e-12);
    let cfg = CovConfig {
        reference: CovReference::OffDiagonal,
        ..CovConfig::default()
    };
    assert_eq!(cov_loss(&z, &cfg).unwrap(), offdiag_cov_loss(&z).unwrap());
}

#[test]
fn covariance_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let (n, m) = (3 + seed as usize % 5, 3 + seed as usize % 6);
        let z = random_tensor(n, m, 500 + seed, 1.5);
        let reference: Vec<f64> = (0..m).map(|i| 0.2 + 0.1 * i as f64).collect();
        let v = cov_loss_against(&z, &reference).unwrap();
        let fd = finite_difference(
            |x| cov_loss_against(&Tensor::new(vec![n, m], x.to_vec()).unwrap(), &reference).unwrap().value,
            z.data(),
            DEFAULT_STEP,
        );
        assert!(max_relative_error(v.grad.data(), &fd) <= 1e-4);
        let o = offdiag_cov_loss(&z).unwrap();
        let fd = finite_difference(
            |x| offdiag_cov_loss(&Tensor::new(vec![n, m], x.to_vec()).unwrap()).unwrap().value,
            z.data(),
            DEFAULT_STEP,
        );
        assert!(max_relative_error(o.grad.data(), &fd) <= 1e-4);
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let (n, k) = (2 + seed as usize % 5, 3 + seed as usize % 6);
        let logits = random_tensor(n, k, 900 + seed, 3.0);
        let targets: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % k).collect();
        let v = cross_entropy(&logits, &targets).unwrap();
        let fd = finite_difference(
            |x| cross_entropy(&Tensor::new(vec![n, k], x.to_vec()).unwrap(), &targets).unwrap().value,
            logits.data(),
            DEFAULT_STEP,
        );
        assert!(max_relative_error(v.grad.data(), &fd) <= 1e-4);
    }
}

// ---- properties ----------------------------------------------------------

fn tensor_strategy(max_rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows).prop_flat_map(move |n| {
        prop::collection::vec(-3.0f64..3.0, n * cols).prop_map(move |d| Tensor::new(vec![n, cols], d).unwrap())
    })
}

fn pair_strategy() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=8).prop_flat_map(|m| (tensor_strategy(10, m), tensor_strategy(10, m)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mmd_is_symmetric_and_nonnegative((a, b) in pair_strategy()) {
        let cfg = KernelConfig::default();
        let ab = mmd_pair(&a, &b, &cfg).unwrap();
        let ba = mmd_pair(&b, &a, &cfg).unwrap();
        prop_assert_eq!(ab.value, ba.value);
        prop_assert!(ab.value >= -1e-12);
        let aa = mmd_pair(&a, &a, &cfg).unwrap();
        prop_assert!(aa.value.abs() <= 1e-12);
    }

    #[test]
    fn cov_loss_is_nonnegative(z in (2usize..=6).prop_flat_map(|m| tensor_strategy(10, m)).prop_filter("n >= 2", |z| z.rows() >= 2)) {
        let cfg = CovConfig::default();
        prop_assert!(cov_loss(&z, &cfg).unwrap().value >= 0.0);
        prop_assert!(offdiag_cov_loss(&z).unwrap().value >= 0.0);
    }
}
