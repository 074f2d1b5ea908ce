//! Per-class Gaussians read off a classifier: samples of class k have
//! mean w_G^k and per-dimension variance λ.

use uap::featdist::{sample_class_features, GaussianClassBank};
use uap::nncore::{Architecture, InputShape};

fn main() {
    let net = Architecture::Mlp {
        hidden: 16,
        features: 6,
        batch_norm: false,
    }
    .build(InputShape::flat(4), 3, 0)
    .unwrap();
    let lambda = 0.01;
    let bank = GaussianClassBank::from_params(net.params(), lambda).unwrap();
    println!("{} classes, m = {}, λ = {}", bank.num_classes(), bank.feature_dim(), bank.lambda());
    for k in 0..bank.num_classes() {
        let mean = bank.mean(k).unwrap();
        let s = sample_class_features(&bank, k, 20_000, 42).unwrap();
        let n = s.rows() as f64;
        let mut worst_mean: f64 = 0.0;
        let mut avg_var = 0.0;
        for (j, mu) in mean.iter().enumerate() {
            let col: Vec<f64> = s.iter_rows().map(|r| r[j]).collect();
            let m = col.iter().sum::<f64>() / n;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            worst_mean = worst_mean.max((m - mu).abs());
            avg_var += v / mean.len() as f64;
        }
        println!("class {k}: max |sample mean − w_G^k| = {worst_mean:.4}, mean variance = {avg_var:.5}");
    }
}
