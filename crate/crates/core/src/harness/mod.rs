//! Config-driven experiments: single runs over several seeds, parameter
//! sweeps, the loss-component ablation, dataset export and the
//! verification suite. The `uap` binary is a thin shell over this module.

mod config;
mod metrics;
mod runner;
pub mod verify;

pub use config::{ArchitectureId, DatasetKind, ExperimentConfig, ReferenceKind, MNIST_DIR_ENV};
pub use metrics::{mean_std, read_csv_test_accuracy, MetricsRecord, RunSummary, CSV_HEADER};
pub use runner::{
    ablate_losses, build_domains, export_domains, load_mnist_splits, run_experiment, run_seed, sweep, AblationRow,
    Progress, SeedResult, SweepParam, SweepResult, ABLATION_ROWS,
};

use thiserror::Error;

use crate::datagen::DataError;
use crate::federation::FedError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Federation(#[from] FedError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl HarnessError {
    /// 2 for usage and configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } | HarnessError::Usage(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}
