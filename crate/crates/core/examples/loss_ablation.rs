//! CE, CE+CDD and CE+CDD+COV on the strong-shift blob benchmark, same
//! seeds for every row. Writes metrics under a temporary directory.

use uap::harness::{ablate_losses, ExperimentConfig};

fn main() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/blobs_strong_shift.toml");
    let mut cfg = ExperimentConfig::load(path).unwrap();
    let out = std::env::temp_dir().join("uap-loss-ablation");
    cfg.out_dir = out.clone();
    for row in ablate_losses(&cfg, None).unwrap() {
        println!(
            "{:<22} {:.4} ± {:.4}  {:?}",
            row.label, row.summary.mean, row.summary.std, row.summary.final_test_accuracy
        );
    }
    println!("metrics in {}", out.display());
}
