use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError};

/// Fixed CSV column order.
pub const CSV_HEADER: &str =
    "round,stage,ce,cdd,cov,total,cdd_skips,server_train_acc,pseudo_label_acc,test_acc,message_bytes";

/// One row per `(round, stage)`; stage is `server`, `client-<i>` or
/// `aggregate`. Fields that do not apply to a stage are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub stage: String,
    pub ce: Option<f64>,
    pub cdd: Option<f64>,
    pub cov: Option<f64>,
    pub total: Option<f64>,
    pub cdd_skips: Option<usize>,
    pub server_train_acc: Option<f64>,
    pub pseudo_label_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub message_bytes: Option<usize>,
}

impl MetricsRecord {
    pub fn new(round: usize, stage: impl Into<String>) -> Self {
        Self {
            round,
            stage: stage.into(),
            ce: None,
            cdd: None,
            cov: None,
            total: None,
            cdd_skips: None,
            server_train_acc: None,
            pseudo_label_acc: None,
            test_acc: None,
            message_bytes: None,
        }
    }

    pub fn csv_row(&self) -> String {
        fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map(ToString::to_string).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.stage,
            opt(&self.ce),
            opt(&self.cdd),
            opt(&self.cov),
            opt(&self.total),
            opt(&self.cdd_skips),
            opt(&self.server_train_acc),
            opt(&self.pseudo_label_acc),
            opt(&self.test_acc),
            opt(&self.message_bytes),
        )
    }
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<(), HarnessError> {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Test accuracy of the last `aggregate` row of a metrics CSV.
pub fn read_csv_test_accuracy(path: &Path) -> Result<Option<f64>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let col = CSV_HEADER.split(',').position(|c| c == "test_acc").expect("column");
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1) == Some("aggregate"))
        .filter_map(|l| l.split(',').nth(col)?.parse().ok())
        .last())
}

/// Mean and sample standard deviation (`n − 1`; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-run JSON summary over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub dataset: String,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub final_test_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Bytes exchanged per seed (identical across seeds).
    pub total_bytes: usize,
}

impl RunSummary {
    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self).expect("summary serializes");
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config {
            field: path.display().to_string(),
            message: e.to_string(),
        })
    }
}
