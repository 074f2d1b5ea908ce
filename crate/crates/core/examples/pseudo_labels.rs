//! Train on a labeled blob domain, then pseudo-label a shifted, unlabeled
//! one with the two-pass nearest-centroid rule and score against the
//! hidden truth.

use uap::datagen::{make_blob_domains, BlobSpec};
use uap::federation::{server_stage, ServerState, StageConfig, TrainingMode};
use uap::nncore::{Architecture, OptimizerState};
use uap::pseudolabel::{generate_pseudo_labels_with_passes, pseudo_label_accuracy};

fn main() {
    let domains = make_blob_domains(&BlobSpec {
        classes: 4,
        dims: 8,
        domains: 2,
        shift_scale: 2.0,
        ..BlobSpec::default()
    })
    .unwrap();
    let net = Architecture::Mlp {
        hidden: 32,
        features: 16,
        batch_norm: false,
    }
    .build(domains[0].input_shape(), 4, 1)
    .unwrap();
    let mut server = ServerState {
        net,
        data: domains[0].clone(),
        opt: OptimizerState::new(0.05, 1),
    };
    let cfg = StageConfig {
        mode: TrainingMode::SsflBaseline,
        batch_size: 32,
        local_epochs: 20,
        ..StageConfig::default()
    };
    server_stage(&mut server, &cfg, 3).unwrap();

    let target = &domains[1];
    let truth = target.diagnostic_labels();
    let direct = server.net.predict(target.examples()).unwrap();
    let hits = direct.iter().zip(truth).filter(|(a, b)| a == b).count();
    println!("argmax of classifier: {:.3}", hits as f64 / truth.len() as f64);
    for passes in 1..=3 {
        let set = generate_pseudo_labels_with_passes(&server.net, target.examples(), passes).unwrap();
        println!("{passes} pass(es): {:.3}", pseudo_label_accuracy(&set, truth).unwrap());
    }
}
