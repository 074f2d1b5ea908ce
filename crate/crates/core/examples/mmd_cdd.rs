//! MMD between two Gaussian clouds as one of them drifts away, and CDD
//! for features that match their class targets versus swapped ones.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use uap::alignlosses::{cdd_loss, mmd_pair, CddConfig, KernelConfig};
use uap::nncore::Tensor;
use uap::seeding::rng_for;

fn cloud(n: usize, m: usize, center: f64, seed: u64) -> Tensor {
    let mut rng = rng_for(&[seed]);
    let data = (0..n * m)
        .map(|i| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g + if i % m == 0 { center } else { 0.0 }
        })
        .collect();
    Tensor::new(vec![n, m], data).unwrap()
}

fn main() {
    let kernel = KernelConfig::default();
    let a = cloud(64, 4, 0.0, 1);
    println!("shift  mmd");
    for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let b = cloud(64, 4, shift, 2);
        println!("{shift:>5.1}  {:.4}", mmd_pair(&a, &b, &kernel).unwrap().value);
    }

    let centers = [-3.0, 0.0, 3.0];
    let feats: BTreeMap<usize, Tensor> =
        centers.iter().enumerate().map(|(k, &c)| (k, cloud(20, 4, c, 10 + k as u64))).collect();
    let matched: BTreeMap<usize, Tensor> =
        centers.iter().enumerate().map(|(k, &c)| (k, cloud(20, 4, c, 20 + k as u64))).collect();
    let swapped: BTreeMap<usize, Tensor> =
        (0..3).map(|k| (k, matched[&((k + 1) % 3)].clone())).collect();
    let cfg = CddConfig::default();
    for (label, t) in [("matched", &matched), ("swapped", &swapped)] {
        let v = cdd_loss(&feats, t, &cfg).unwrap();
        println!("{label}: cdd {:.4} (intra {:.4}, inter {:.4})", v.value, v.intra, v.inter);
    }
}
