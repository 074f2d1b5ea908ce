use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::write_csv;
use super::{io_err, mean_std, DatasetKind, ExperimentConfig, HarnessError, MetricsRecord, RunSummary};
use crate::datagen::{
    assign_domains, load_idx, make_blob_domains, rotated_mnist_domains, write_idx, DataError, DomainDataset,
};
use crate::federation::{evaluate, CommLedger, Federation, TrainingMode};
use crate::seeding::{derive_seed, stream};

/// Progress sink; `None` runs silently.
pub type Progress<'a> = Option<&'a dyn Fn(&str)>;

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf, HarnessError> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(HarnessError::Data(DataError::InvalidArgument(format!(
        "{stem}[.gz] not found in {} (set {} or mnist_dir)",
        dir.display(),
        super::MNIST_DIR_ENV
    ))))
}

/// `(train, test)` MNIST splits from `dir`.
pub fn load_mnist_splits(dir: &Path) -> Result<(DomainDataset, DomainDataset), HarnessError> {
    let train = load_idx(find_idx(dir, "train-images-idx3-ubyte")?, find_idx(dir, "train-labels-idx1-ubyte")?)?;
    let test = load_idx(find_idx(dir, "t10k-images-idx3-ubyte")?, find_idx(dir, "t10k-labels-idx1-ubyte")?)?;
    Ok((train.with_id("mnist-train"), test.with_id("mnist-test")))
}

fn parse_rotation(id: &str) -> Option<f64> {
    id.strip_prefix('M')?.parse().ok()
}

/// All domains the config describes.
pub fn build_domains(cfg: &ExperimentConfig) -> Result<Vec<DomainDataset>, HarnessError> {
    match cfg.dataset {
        DatasetKind::RotatedMnist => {
            let test_angle = parse_rotation(&cfg.test_domain).ok_or_else(|| HarnessError::Config {
                field: "test_domain".into(),
                message: format!("`{}` is not a rotation id like M0", cfg.test_domain),
            })?;
            let (train, test) = load_mnist_splits(&cfg.mnist_dir())?;
            Ok(rotated_mnist_domains(
                &train,
                &test,
                &cfg.angles,
                cfg.per_domain,
                test_angle,
                cfg.data_seed,
            )?)
        }
        DatasetKind::Blobs => Ok(make_blob_domains(&cfg.blob_spec())?),
    }
}

/// Writes every domain of the config as an IDX pair under `out`.
pub fn export_domains(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::new();
    for d in build_domains(cfg)? {
        let img = out.join(format!("{}-images-idx3-ubyte.gz", d.id()));
        let lab = out.join(format!("{}-labels-idx1-ubyte.gz", d.id()));
        write_idx(&d, &img, &lab)?;
        written.push(img);
        written.push(lab);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub final_test_accuracy: f64,
    pub records: Vec<MetricsRecord>,
    pub ledger: CommLedger,
}

/// One seed of one configuration.
pub fn run_seed(
    cfg: &ExperimentConfig,
    domains: &[DomainDataset],
    seed: u64,
    progress: Progress,
) -> Result<SeedResult, HarnessError> {
    let assigned = assign_domains(domains, &cfg.assignment())?;
    let classes = assigned.server.num_classes();
    let init = cfg
        .architecture()
        .build(assigned.server.input_shape(), classes, derive_seed(&[stream::INIT, seed]))
        .map_err(crate::federation::FedError::from)?;
    let clients = if cfg.rounds == 0 { Vec::new() } else { assigned.clients };
    let mut fed = Federation::new(
        init,
        assigned.server,
        clients,
        cfg.stage_config(),
        cfg.lr0,
        cfg.rounds,
        seed,
    )?;
    let mut records = Vec::new();
    let mut test_acc = 0.0;
    for _ in 0..cfg.rounds.max(1) {
        let started = Instant::now();
        let report = fed.run_round()?;
        let mut s = MetricsRecord::new(report.round, "server");
        s.ce = Some(report.server.mean_ce());
        s.cdd = Some(report.server.mean_cdd());
        s.cov = Some(report.server.mean_cov());
        s.total = Some(report.server.mean_total());
        s.cdd_skips = Some(report.server.cdd_skips());
        s.server_train_acc = Some(evaluate(&fed.server.net, &fed.server.data)?);
        records.push(s);
        for c in &report.clients {
            let mut r = MetricsRecord::new(report.round, format!("client-{}", c.client));
            r.ce = Some(c.trace.mean_ce());
            r.cdd = Some(c.trace.mean_cdd());
            r.cov = Some(c.trace.mean_cov());
            r.total = Some(c.trace.mean_total());
            r.cdd_skips = Some(c.trace.cdd_skips());
            r.pseudo_label_acc = Some(c.pseudo_label_accuracy);
            records.push(r);
        }
        test_acc = evaluate(&fed.global, &assigned.test)?;
        let mut a = MetricsRecord::new(report.round, "aggregate");
        a.test_acc = Some(test_acc);
        a.message_bytes = Some(report.bytes);
        records.push(a);
        if let Some(p) = progress {
            p(&format!(
                "seed {seed} round {}/{}: test {test_acc:.4} ({:.1}s)",
                report.round + 1,
                cfg.rounds.max(1),
                started.elapsed().as_secs_f64()
            ));
        }
    }
    Ok(SeedResult {
        seed,
        final_test_accuracy: test_acc,
        records,
        ledger: fed.ledger,
    })
}

/// Marker written next to a finished seed's CSV so interrupted runs can
/// resume; it is only trusted when the configuration matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SeedDone {
    config: String,
    final_test_accuracy: f64,
    total_bytes: usize,
}

fn fingerprint(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.seeds = Vec::new();
    c.out_dir = PathBuf::new();
    c.to_toml_string()
}

/// Runs every seed, writing `seed-<s>.csv` and `summary.json` into
/// `cfg.out_dir`. Seeds with a matching completion marker are reused.
pub fn run_experiment(cfg: &ExperimentConfig, progress: Progress) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut domains = None;
    let mut finals = Vec::new();
    let mut total_bytes = 0;
    let fp = fingerprint(cfg);
    for &seed in &cfg.seeds {
        let csv = out.join(format!("seed-{seed}.csv"));
        let done = out.join(format!("seed-{seed}.done.json"));
        if let Some(prev) = std::fs::read_to_string(&done)
            .ok()
            .and_then(|t| serde_json::from_str::<SeedDone>(&t).ok())
            .filter(|d| d.config == fp && csv.exists())
        {
            if let Some(p) = progress {
                p(&format!("seed {seed}: reusing {}", csv.display()));
            }
            finals.push(prev.final_test_accuracy);
            total_bytes = prev.total_bytes;
            continue;
        }
        if domains.is_none() {
            domains = Some(build_domains(cfg)?);
        }
        let res = run_seed(cfg, domains.as_deref().expect("built"), seed, progress)?;
        write_csv(&csv, &res.records)?;
        let marker = SeedDone {
            config: fp.clone(),
            final_test_accuracy: res.final_test_accuracy,
            total_bytes: res.ledger.total_bytes(),
        };
        std::fs::write(&done, serde_json::to_string(&marker).expect("marker serializes")).map_err(io_err(&done))?;
        finals.push(res.final_test_accuracy);
        total_bytes = res.ledger.total_bytes();
    }
    let (mean, std) = mean_std(&finals);
    let summary = RunSummary {
        mode: cfg.mode.as_str().into(),
        dataset: match cfg.dataset {
            DatasetKind::RotatedMnist => "rotated-mnist".into(),
            DatasetKind::Blobs => "blobs".into(),
        },
        rounds: cfg.rounds,
        seeds: cfg.seeds.clone(),
        final_test_accuracy: finals,
        mean,
        std,
        total_bytes,
    };
    summary.write(&out.join("summary.json"))?;
    Ok(summary)
}

// ---- sweeps ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Beta,
    Gamma,
    Lambda,
    Nk,
    ClientsSplit,
}

impl std::str::FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "alpha" => SweepParam::Alpha,
            "beta" => SweepParam::Beta,
            "gamma" => SweepParam::Gamma,
            "lambda" => SweepParam::Lambda,
            "nk" => SweepParam::Nk,
            "clients-split" => SweepParam::ClientsSplit,
            other => {
                return Err(HarnessError::Usage(format!(
                    "unknown sweep parameter `{other}` (alpha, beta, gamma, lambda, nk, clients-split)"
                )))
            }
        })
    }
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Gamma => "gamma",
            SweepParam::Lambda => "lambda",
            SweepParam::Nk => "nk",
            SweepParam::ClientsSplit => "clients-split",
        }
    }

    fn apply(&self, cfg: &mut ExperimentConfig, value: &str) -> Result<(), HarnessError> {
        let bad = |e: &dyn std::fmt::Display| HarnessError::Usage(format!("bad {} value `{value}`: {e}", self.name()));
        let float = || value.parse::<f64>().map_err(|e| bad(&e));
        let int = || value.parse::<usize>().map_err(|e| bad(&e));
        match self {
            SweepParam::Alpha => cfg.alpha = float()?,
            SweepParam::Beta => cfg.beta = float()?,
            SweepParam::Gamma => cfg.gamma = float()?,
            SweepParam::Lambda => cfg.lambda = float()?,
            SweepParam::Nk => cfg.nk = int()?,
            SweepParam::ClientsSplit => cfg.clients_split = int()?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub param: String,
    pub value: String,
    pub summary: RunSummary,
}

/// One full run per value, each under `<out_dir>/<param>-<value>`.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[String],
    progress: Progress,
) -> Result<Vec<SweepResult>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Usage("sweep needs at least one value".into()));
    }
    let mut runs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.clone();
        param.apply(&mut c, v)?;
        c.out_dir = cfg.out_dir.join(format!("{}-{v}", param.name()));
        c.validate()?;
        runs.push((v.clone(), c));
    }
    let mut results = Vec::new();
    for (v, c) in runs {
        let summary = run_experiment(&c, progress)?;
        results.push(SweepResult {
            param: param.name().into(),
            value: v,
            summary,
        });
    }
    let path = cfg.out_dir.join("sweep.json");
    std::fs::write(&path, serde_json::to_string_pretty(&results).expect("serializes") + "\n").map_err(io_err(&path))?;
    Ok(results)
}

// ---- loss ablation --------------------------------------------------------

/// Row labels with the mode each one runs.
pub const ABLATION_ROWS: [(&str, TrainingMode); 3] = [
    ("L_CE", TrainingMode::SsflBaseline),
    ("L_CE+αL_CDD", TrainingMode::CeCdd),
    ("L_CE+αL_CDD+βL_COV", TrainingMode::Uap),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub summary: RunSummary,
}

/// The three loss configurations with shared seeds, each under
/// `<out_dir>/<mode>`.
pub fn ablate_losses(cfg: &ExperimentConfig, progress: Progress) -> Result<Vec<AblationRow>, HarnessError> {
    let mut rows = Vec::new();
    for (label, mode) in ABLATION_ROWS {
        let mut c = cfg.clone();
        c.mode = mode;
        c.out_dir = cfg.out_dir.join(mode.as_str());
        let summary = run_experiment(&c, progress)?;
        rows.push(AblationRow {
            label: label.into(),
            summary,
        });
    }
    let path = cfg.out_dir.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&rows).expect("serializes") + "\n").map_err(io_err(&path))?;
    Ok(rows)
}
