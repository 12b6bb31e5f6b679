//! Output writers: per-strategy report directories and the comparison
//! table over previously written runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::SimulationReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

// =======================================================================
// Per-strategy outputs
// =======================================================================

/// Write one strategy's outputs under `dir/<strategy>/`: the full
/// `report.json` plus flat `f1_by_month.csv` and `ledger.csv` views.
/// Returns the strategy directory. Headers are always written, even
/// when a file has no data rows.
pub fn write_report(dir: &Path, report: &SimulationReport) -> Result<PathBuf, ReportError> {
    let out = dir.join(&report.strategy);
    fs::create_dir_all(&out).map_err(io_at(&out))?;

    let json_path = out.join("report.json");
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(&json_path, json).map_err(io_at(&json_path))?;

    let f1_path = out.join("f1_by_month.csv");
    let mut w = csv::Writer::from_path(&f1_path)?;
    w.write_record(["month", "strategy", "endpoint", "f1"])?;
    for rec in &report.monthly {
        for (endpoint, &f1) in rec.endpoint_f1.iter().enumerate() {
            w.write_record(&[
                rec.month.to_string(),
                report.strategy.clone(),
                endpoint.to_string(),
                format!("{f1}"),
            ])?;
        }
    }
    w.flush().map_err(io_at(&f1_path))?;

    let ledger_path = out.join("ledger.csv");
    let mut w = csv::Writer::from_path(&ledger_path)?;
    w.write_record(["month", "sender", "receiver", "kind", "bytes"])?;
    for e in &report.ledger.entries {
        w.write_record(&[
            e.month.to_string(),
            e.sender.to_string(),
            e.receiver.to_string(),
            e.kind.as_str().to_string(),
            e.bytes.to_string(),
        ])?;
    }
    w.flush().map_err(io_at(&ledger_path))?;

    Ok(out)
}

// =======================================================================
// Comparison
// =======================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    /// Mean endpoint-mean F1 over all inference months.
    pub mean_f1: f64,
    /// Mean over the final 12 months (clipped to inference months).
    pub final_12_f1: f64,
    pub retraining_count: usize,
    pub ledger_total_bytes: u64,
}

/// Load every `<dir>/*/report.json` and rank strategies by mean F1,
/// descending (ties break on name). At least two reports are required
/// for a comparison to mean anything.
pub fn compare(dir: &Path) -> Result<Vec<ComparisonRow>, ReportError> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.json").is_file())
        .collect();
    subdirs.sort();
    let mut rows = Vec::new();
    for sub in subdirs {
        let path = sub.join("report.json");
        let text = fs::read_to_string(&path).map_err(io_at(&path))?;
        let report: SimulationReport = serde_json::from_str(&text)?;
        rows.push(ComparisonRow {
            strategy: report.strategy.clone(),
            mean_f1: report.mean_f1_inference(),
            final_12_f1: report.mean_f1_final(12),
            retraining_count: report.retraining_months.len(),
            ledger_total_bytes: report.ledger_total_bytes,
        });
    }
    if rows.len() < 2 {
        return Err(ReportError::Invalid(format!(
            "comparison needs at least 2 reports under {}, found {}",
            dir.display(),
            rows.len()
        )));
    }
    rows.sort_by(|a, b| {
        b.mean_f1
            .total_cmp(&a.mean_f1)
            .then_with(|| a.strategy.cmp(&b.strategy))
    });
    Ok(rows)
}

/// Plain-text table, one row per strategy.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let name_w = rows
        .iter()
        .map(|r| r.strategy.len())
        .chain(std::iter::once("strategy".len()))
        .max()
        .unwrap_or(8);
    let mut out = format!(
        "{:<name_w$}  {:>8}  {:>11}  {:>9}  {:>12}\n",
        "strategy", "mean_f1", "final_12_f1", "retrains", "ledger_bytes"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>8.4}  {:>11.4}  {:>9}  {:>12}\n",
            r.strategy, r.mean_f1, r.final_12_f1, r.retraining_count, r.ledger_total_bytes
        ));
    }
    out
}

/// Write `comparison.csv` next to the per-strategy directories.
pub fn write_comparison_csv(dir: &Path, rows: &[ComparisonRow]) -> Result<PathBuf, ReportError> {
    let path = dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_at(&path))?;
    Ok(path)
}
