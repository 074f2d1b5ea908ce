//! A full federation on blob domains: labeled server B0, unlabeled
//! clients, test domain B1. Prints per-round losses and test accuracy.

use uap::datagen::{assign_domains, make_blob_domains, BlobSpec, DomainAssignment};
use uap::federation::{evaluate, Federation, StageConfig, TrainingMode};
use uap::nncore::Architecture;

fn main() {
    let mode = match std::env::args().nth(1).as_deref() {
        Some("baseline") => TrainingMode::SsflBaseline,
        _ => TrainingMode::Uap,
    };
    let domains = make_blob_domains(&BlobSpec {
        domains: 6,
        shift_scale: 3.0,
        ..BlobSpec::default()
    })
    .unwrap();
    let plan = DomainAssignment {
        server: "B0".into(),
        test: "B1".into(),
        clients: None,
        split: None,
    };
    let assigned = assign_domains(&domains, &plan).unwrap();
    let arch = Architecture::Mlp {
        hidden: 32,
        features: 16,
        batch_norm: false,
    };
    let init = arch.build(assigned.server.input_shape(), 4, 0).unwrap();
    let cfg = StageConfig {
        mode,
        batch_size: 32,
        local_epochs: 2,
        ..StageConfig::default()
    };
    let rounds = 10;
    let mut fed = Federation::new(init, assigned.server, assigned.clients, cfg, 0.01, rounds, 0).unwrap();
    println!("mode {}", mode.as_str());
    for _ in 0..rounds {
        let r = fed.run_round().unwrap();
        println!(
            "round {:>2}: server ce {:.3} cdd {:+.3} cov {:.3} | test {:.3}",
            r.round,
            r.server.mean_ce(),
            r.server.mean_cdd(),
            r.server.mean_cov(),
            evaluate(&fed.global, &assigned.test).unwrap()
        );
    }
    println!("{} bytes exchanged", fed.ledger.total_bytes());
}
