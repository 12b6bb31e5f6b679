//! Experiment driver for the driftfed library.
//!
//! Exit codes: 0 on success, 1 for runtime failures (including a failed
//! calibration or an impossible comparison), 2 for configuration and
//! parse problems.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use driftfed::calibrate::{calibrate, CalibrateError};
use driftfed::config::{ConfigError, ExperimentConfig};
use driftfed::federation::run_strategy;
use driftfed::report::{compare, render_table, write_comparison_csv, write_report, ReportError};

#[derive(Parser)]
#[command(
    name = "driftfed",
    version,
    about = "Simulate drift mitigation strategies on a federated malware-detection deployment"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every strategy in the config; write one report directory each.
    Run {
        /// Experiment config (JSON).
        config: PathBuf,
        /// Output directory; one subdirectory per strategy.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Grid-search detector parameters on drift-free training months.
    Calibrate {
        /// Experiment config (JSON).
        config: PathBuf,
        /// Directory that receives calibration.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Rank previously written report directories by mean F1.
    Compare {
        /// Directory holding the per-strategy subdirectories.
        dir: PathBuf,
    },
}

enum AppError {
    /// Bad config file or bad DRIFTFED_SEED: exit 2.
    Config(String),
    /// Anything that failed at runtime: exit 1.
    Runtime(String),
}

impl AppError {
    fn code(&self) -> ExitCode {
        match self {
            AppError::Config(_) => ExitCode::from(2),
            AppError::Runtime(_) => ExitCode::from(1),
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> AppError {
        AppError::Config(e.to_string())
    }
}

impl From<ReportError> for AppError {
    fn from(e: ReportError) -> AppError {
        AppError::Runtime(e.to_string())
    }
}

impl From<CalibrateError> for AppError {
    fn from(e: CalibrateError) -> AppError {
        AppError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.cmd {
        Cmd::Run { config, out } => cmd_run(&config, &out),
        Cmd::Calibrate { config, out } => cmd_calibrate(&config, &out),
        Cmd::Compare { dir } => cmd_compare(&dir),
    }
}

/// Load a config, honoring the DRIFTFED_SEED override.
fn load_config(path: &Path) -> Result<ExperimentConfig, AppError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Ok(raw) = std::env::var("DRIFTFED_SEED") {
        let seed: u64 = raw.trim().parse().map_err(|_| {
            AppError::Config(format!("DRIFTFED_SEED must be an unsigned integer, got `{raw}`"))
        })?;
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_run(config_path: &Path, out: &Path) -> Result<(), AppError> {
    let cfg = load_config(config_path)?;
    fs::create_dir_all(out)
        .map_err(|e| AppError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    for strategy in &cfg.strategies {
        let report =
            run_strategy(&cfg, strategy).map_err(|e| AppError::Runtime(e.to_string()))?;
        for w in &report.warnings {
            eprintln!("warning [{}]: {w}", report.strategy);
        }
        let dir = write_report(out, &report)?;
        println!(
            "{}: mean F1 {:.4} over months {}..{}, {} retraining months, {} drift events, {} ledger bytes -> {}",
            report.strategy,
            report.mean_f1_inference(),
            report.train_months,
            report.months,
            report.retraining_months.len(),
            report.drift_events.len(),
            report.ledger_total_bytes,
            dir.display()
        );
    }
    if cfg.strategies.len() >= 2 {
        let rows = compare(out)?;
        write_comparison_csv(out, &rows)?;
        print!("{}", render_table(&rows));
    }
    Ok(())
}

fn cmd_calibrate(config_path: &Path, out: &Path) -> Result<(), AppError> {
    let cfg = load_config(config_path)?;
    let calibration = calibrate(&cfg)?;
    fs::create_dir_all(out)
        .map_err(|e| AppError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let path = out.join("calibration.json");
    let mut json = serde_json::to_string_pretty(&calibration)
        .map_err(|e| AppError::Runtime(e.to_string()))?;
    json.push('\n');
    fs::write(&path, json)
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    for fam in &calibration.families {
        let setting = serde_json::to_string(&fam.chosen)
            .map_err(|e| AppError::Runtime(e.to_string()))?;
        println!(
            "{}: chose {} (quiet over {} streams of {} samples)",
            fam.family, setting, calibration.n_streams, calibration.stream_len
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_compare(dir: &Path) -> Result<(), AppError> {
    let rows = compare(dir)?;
    print!("{}", render_table(&rows));
    Ok(())
}
