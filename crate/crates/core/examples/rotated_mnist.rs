//! Rotated MNIST domains from the bundled IDX files (or $UAP_MNIST_DIR)
//! and a short UAP federation on them: server M15, test M0.
//!
//!     cargo run --release --example rotated_mnist [rounds]

use uap::harness::{run_seed, build_domains, ExperimentConfig};

fn main() {
    let rounds = std::env::args().nth(1).and_then(|r| r.parse().ok()).unwrap_or(2);
    let cfg = ExperimentConfig {
        rounds,
        local_epochs: 1,
        per_domain: 300,
        ..ExperimentConfig::default()
    };
    let domains = build_domains(&cfg).unwrap();
    for d in &domains {
        println!("{}: {} images", d.id(), d.len());
    }
    let log = |m: &str| println!("{m}");
    let res = run_seed(&cfg, &domains, 0, Some(&log)).unwrap();
    println!("final test accuracy on M0: {:.3}", res.final_test_accuracy);
}
