use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uap::federation::TrainingMode;
use uap::harness::verify::{run_verify, VerifyOptions};
use uap::harness::{
    ablate_losses, export_domains, run_experiment, sweep, ExperimentConfig, HarnessError, SweepParam, EXIT_OK,
    EXIT_USAGE,
};

#[derive(Parser)]
#[command(name = "uap", version, about = "Semi-supervised federated domain generalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<TrainingMode>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train over every configured seed and write CSVs plus a summary.
    Run,
    /// One run per value of a hyperparameter.
    Sweep {
        /// alpha, beta, gamma, lambda, nk or clients-split
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// CE, CE+CDD and CE+CDD+COV with shared seeds.
    AblateLosses,
    /// Gradient, oracle, aggregation and overhead checks.
    Verify {
        /// Corrupt the analytic gradient of the named layer.
        #[arg(long)]
        fault_layer: Option<String>,
    },
    /// Write the configured domains as IDX files.
    Datagen,
}

fn parse_mode(s: &str) -> Result<TrainingMode, String> {
    match s {
        "uap" => Ok(TrainingMode::Uap),
        "ssfl-baseline" => Ok(TrainingMode::SsflBaseline),
        "ce-cdd" => Ok(TrainingMode::CeCdd),
        _ => Err(format!("unknown mode `{s}` (uap, ssfl-baseline, ce-cdd)")),
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    let log = |msg: &str| eprintln!("{msg}");
    let progress: uap::harness::Progress = if cli.quiet { None } else { Some(&log) };
    match &cli.command {
        Command::Run => {
            let s = run_experiment(&load(cli)?, progress)?;
            println!("{} {}: test accuracy {:.4} ± {:.4} over seeds {:?}", s.dataset, s.mode, s.mean, s.std, s.seeds);
        }
        Command::Sweep { param, values } => {
            let p: SweepParam = param.parse()?;
            let cfg = load(cli)?;
            let results = sweep(&cfg, p, values, progress)?;
            println!("{:<16} {:>10} {:>10}", p.name(), "mean", "std");
            for r in results {
                println!("{:<16} {:>10.4} {:>10.4}", r.value, r.summary.mean, r.summary.std);
            }
        }
        Command::AblateLosses => {
            let cfg = load(cli)?;
            for r in ablate_losses(&cfg, progress)? {
                println!("{:<22} {:>8.4} ± {:.4}", r.label, r.summary.mean, r.summary.std);
            }
        }
        Command::Verify { fault_layer } => {
            let report = run_verify(&VerifyOptions {
                fault_layer: fault_layer.clone(),
                ..VerifyOptions::default()
            });
            for c in &report.checks {
                if !cli.quiet || !c.passed {
                    println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
            }
            let failed: Vec<_> = report.failures().iter().map(|c| c.name.clone()).collect();
            if !failed.is_empty() {
                return Err(HarnessError::Verification(failed.join(", ")));
            }
        }
        Command::Datagen => {
            let cfg = load(cli)?;
            for p in export_domains(&cfg, &cfg.out_dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { EXIT_OK as u8 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
