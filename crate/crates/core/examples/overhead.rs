//! Communication cost: the UAP and plain SSFL ledgers are identical, while
//! shipping explicit per-class Gaussians would dwarf the model itself.

use uap::featdist::{compute_overhead, RESNET50_PARAM_COUNT};
use uap::federation::TrainingMode;
use uap::harness::verify::tiny_ledger;
use uap::nncore::{Architecture, InputShape};

fn main() {
    let arch = Architecture::Mlp {
        hidden: 16,
        features: 8,
        batch_norm: false,
    };
    let input = InputShape::flat(10);
    let uap = tiny_ledger(arch, input, TrainingMode::Uap, 0).unwrap();
    let base = tiny_ledger(arch, input, TrainingMode::SsflBaseline, 0).unwrap();
    for r in 0..uap.rounds() {
        println!("round {r}: uap {} bytes, baseline {} bytes", uap.round_bytes(r), base.round_bytes(r));
    }
    println!("ledgers identical: {}", uap.messages == base.messages);

    let o = compute_overhead(1000, 2048, RESNET50_PARAM_COUNT);
    println!(
        "ResNet-50, 1000 classes, m = 2048: {} extra scalars = {:.1}x the model's {} parameters",
        o.scalars_avoided, o.ratio, o.model_param_count
    );
}
