use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::alignlosses::{CddConfig, ClassSubset, CovConfig, CovReference};
use crate::datagen::{BlobSpec, DomainAssignment};
use crate::federation::{StageConfig, TrainingMode};
use crate::nncore::Architecture;

/// Environment variable naming the directory holding the four MNIST IDX
/// files (optionally gzipped).
pub const MNIST_DIR_ENV: &str = "UAP_MNIST_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    RotatedMnist,
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureId {
    Cnn,
    Mlp,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    /// `Σ = γ·λ·I`.
    Scaled,
    /// Off-diagonal entries only.
    Offdiag,
}

/// Every hyperparameter of an experiment. Each field is one flat key in
/// the config file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: TrainingMode,
    pub dataset: DatasetKind,
    pub architecture: ArchitectureId,
    /// Feature width `m`.
    pub feature_dim: usize,
    /// Hidden width of the MLP architecture.
    pub hidden: usize,
    pub batch_norm: bool,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub reference: ReferenceKind,
    /// `|C'|`; 0 takes every class present in the batch.
    pub class_subset: usize,
    /// `N_k`; 0 takes every batch example of a class.
    pub nk: usize,
    pub reparameterize: bool,
    pub pseudo_label_passes: usize,
    pub server_from_global: bool,

    pub batch_size: usize,
    pub lr0: f64,
    pub local_epochs: usize,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    /// Seed for domain construction, shared by all run seeds.
    pub data_seed: u64,
    pub out_dir: PathBuf,

    pub server_domain: String,
    pub test_domain: String,
    /// Empty: every domain except server and test.
    pub client_domains: Vec<String>,
    pub clients_split: usize,

    /// Rotated MNIST.
    pub angles: Vec<f64>,
    pub per_domain: usize,
    /// Overrides the environment variable and the bundled data directory.
    pub mnist_dir: Option<PathBuf>,

    /// Blobs.
    pub blob_classes: usize,
    pub blob_dims: usize,
    pub blob_domains: usize,
    pub blob_per_class: usize,
    pub blob_shift: f64,
    pub blob_rot: f64,
    pub blob_sep: f64,
    pub blob_noise: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Uap,
            dataset: DatasetKind::RotatedMnist,
            architecture: ArchitectureId::Cnn,
            feature_dim: 128,
            hidden: 256,
            batch_norm: false,
            alpha: 1.0,
            beta: 1.0,
            gamma: 100.0,
            lambda: 0.01,
            reference: ReferenceKind::Scaled,
            class_subset: 0,
            nk: 0,
            reparameterize: false,
            pseudo_label_passes: 2,
            server_from_global: true,
            batch_size: 64,
            lr0: 0.002,
            local_epochs: 5,
            rounds: 40,
            seeds: vec![0, 1, 2],
            data_seed: 0,
            out_dir: PathBuf::from("results/run"),
            server_domain: "M15".into(),
            test_domain: "M0".into(),
            client_domains: Vec::new(),
            clients_split: 1,
            angles: vec![0.0, 15.0, 30.0, 45.0, 60.0, 75.0],
            per_domain: 1000,
            mnist_dir: None,
            blob_classes: 4,
            blob_dims: 8,
            blob_domains: 4,
            blob_per_class: 50,
            blob_shift: 0.0,
            blob_rot: 0.0,
            blob_sep: 3.0,
            blob_noise: 1.0,
        }
    }
}

fn field(name: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: name.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let span = e.span().map(|s| text[..s.start].lines().count().max(1));
            HarnessError::Config {
                field: span.map_or_else(|| "<file>".into(), |l| format!("line {l}")),
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| field("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(field(name, format!("must be > 0, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(field(name, format!("must be >= 0, got {v}")))
            }
        };
        non_negative("alpha", self.alpha)?;
        non_negative("beta", self.beta)?;
        non_negative("gamma", self.gamma)?;
        positive("lambda", self.lambda)?;
        positive("lr0", self.lr0)?;
        if self.batch_size < 2 {
            return Err(field("batch_size", "must be >= 2"));
        }
        if self.local_epochs == 0 {
            return Err(field("local_epochs", "must be >= 1"));
        }
        if self.pseudo_label_passes == 0 {
            return Err(field("pseudo_label_passes", "must be >= 1"));
        }
        if self.class_subset == 1 {
            return Err(field("class_subset", "must be 0 (all) or >= 2"));
        }
        if self.nk == 1 {
            return Err(field("nk", "must be 0 (all) or >= 2"));
        }
        if self.seeds.is_empty() {
            return Err(field("seeds", "needs at least one seed"));
        }
        if self.feature_dim == 0 {
            return Err(field("feature_dim", "must be >= 1"));
        }
        if self.clients_split == 0 {
            return Err(field("clients_split", "must be >= 1"));
        }
        if self.server_domain == self.test_domain {
            return Err(field("test_domain", "must differ from server_domain"));
        }
        match self.dataset {
            DatasetKind::RotatedMnist => {
                if self.per_domain == 0 {
                    return Err(field("per_domain", "must be >= 1"));
                }
                if self.angles.iter().any(|a| !(0.0..=360.0).contains(a)) {
                    return Err(field("angles", "angles must lie in [0, 360]"));
                }
            }
            DatasetKind::Blobs => {
                for (name, v) in [
                    ("blob_classes", self.blob_classes),
                    ("blob_dims", self.blob_dims),
                    ("blob_domains", self.blob_domains),
                    ("blob_per_class", self.blob_per_class),
                ] {
                    if v == 0 {
                        return Err(field(name, "must be >= 1"));
                    }
                }
                if self.blob_domains < 2 {
                    return Err(field("blob_domains", "need at least a server and a test domain"));
                }
                non_negative("blob_shift", self.blob_shift)?;
                non_negative("blob_rot", self.blob_rot)?;
                non_negative("blob_noise", self.blob_noise)?;
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        match self.architecture {
            ArchitectureId::Cnn => Architecture::Cnn {
                features: self.feature_dim,
                batch_norm: self.batch_norm,
            },
            ArchitectureId::Mlp => Architecture::Mlp {
                hidden: self.hidden,
                features: self.feature_dim,
                batch_norm: self.batch_norm,
            },
            ArchitectureId::Identity => Architecture::Identity,
        }
    }

    pub fn stage_config(&self) -> StageConfig {
        StageConfig {
            mode: self.mode,
            alpha: self.alpha,
            beta: self.beta,
            cdd: CddConfig {
                class_subset: match self.class_subset {
                    0 => ClassSubset::AllPresent,
                    s => ClassSubset::Random(s),
                },
                samples_per_class: (self.nk > 0).then_some(self.nk),
                reparameterize: self.reparameterize,
                ..CddConfig::default()
            },
            cov: CovConfig {
                weight: self.beta,
                gamma: self.gamma,
                lambda: self.lambda,
                reference: match self.reference {
                    ReferenceKind::Scaled => CovReference::ScaledClassCovariance,
                    ReferenceKind::Offdiag => CovReference::OffDiagonal,
                },
            },
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            pseudo_label_passes: self.pseudo_label_passes,
            server_from_global: self.server_from_global,
        }
    }

    pub fn assignment(&self) -> DomainAssignment {
        DomainAssignment {
            server: self.server_domain.clone(),
            test: self.test_domain.clone(),
            clients: (!self.client_domains.is_empty()).then(|| self.client_domains.clone()),
            split: Some(self.clients_split),
        }
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            classes: self.blob_classes,
            dims: self.blob_dims,
            domains: self.blob_domains,
            shift_scale: self.blob_shift,
            rot_scale: self.blob_rot,
            n_per_class: self.blob_per_class,
            class_sep: self.blob_sep,
            noise: self.blob_noise,
            seed: self.data_seed,
        }
    }

    /// `mnist_dir`, else `$UAP_MNIST_DIR`, else the bundled `data/mnist`.
    pub fn mnist_dir(&self) -> PathBuf {
        if let Some(d) = &self.mnist_dir {
            return d.clone();
        }
        if let Some(d) = std::env::var_os(MNIST_DIR_ENV) {
            return PathBuf::from(d);
        }
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
    }
}
