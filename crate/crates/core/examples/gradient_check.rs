//! Central finite differences against backprop, layer by layer, for a
//! small CNN with batch norm under the composite CE + CDD + COV loss.
//!
//!     cargo run --release --example gradient_check [fault-layer]

use std::collections::BTreeMap;

use uap::featdist::{sample_class_features, GaussianClassBank};
use uap::harness::verify::{composite_alignment_loss, gradcheck_networks, GRAD_TOLERANCE};
use uap::nncore::gradcheck::{check_network_gradients, GradCheckOptions};
use uap::nncore::Tensor;

fn main() {
    let opts = GradCheckOptions {
        fault_layer: std::env::args().nth(1),
        ..GradCheckOptions::default()
    };
    for (name, net, x, labels) in gradcheck_networks(7) {
        let bank = GaussianClassBank::from_params(net.params(), 0.01).unwrap();
        let targets: BTreeMap<usize, Tensor> =
            (0..3).map(|k| (k, sample_class_features(&bank, k, 3, 7).unwrap())).collect();
        let reports = check_network_gradients(
            &net,
            &x,
            |n, b, bp| composite_alignment_loss(n, b, &labels, &targets, bp),
            &opts,
        )
        .unwrap();
        println!("{name}");
        for r in reports {
            let verdict = if r.max_rel_error <= GRAD_TOLERANCE { "ok" } else { "FAIL" };
            println!("  {:<12} {:>6} params  max rel err {:.2e}  {verdict}", r.layer, r.checked, r.max_rel_error);
        }
    }
}
