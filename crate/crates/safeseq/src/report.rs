//! CSV and JSON emission for training metrics and evaluation reports.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use safeseq_core::eval::{AveragedRow, EpisodeRecord, EvalReport, ThresholdRow};
use safeseq_core::trainer::MetricsRow;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// The report without per-episode records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<ThresholdRow>,
    pub averaged: AveragedRow,
    pub safe: bool,
    pub episodes: usize,
    pub checksum_before: u64,
    pub checksum_after: u64,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            rows: r.rows.clone(),
            averaged: r.averaged.clone(),
            safe: r.safe,
            episodes: r.episodes.len(),
            checksum_before: r.checksum_before,
            checksum_after: r.checksum_after,
        }
    }
}

#[derive(Debug, Serialize)]
struct PlotPoint {
    threshold: f64,
    normalized_return: f64,
    normalized_return_se: f64,
    normalized_cost: f64,
    normalized_cost_se: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub episodes_csv: PathBuf,
    pub summary_json: PathBuf,
    pub plot_csv: PathBuf,
}

pub fn write_csv<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<(), ReportError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), ReportError> {
    write_csv(path, rows)
}

/// Writes `episodes.csv`, `summary.json` and `plot.csv` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<ReportPaths, ReportError> {
    fs::create_dir_all(dir)?;
    let paths = ReportPaths { episodes_csv: dir.join("episodes.csv"), summary_json: dir.join("summary.json"), plot_csv: dir.join("plot.csv") };
    write_csv(&paths.episodes_csv, &report.episodes)?;
    write_json(&paths.summary_json, &EvalSummary::from(report))?;
    write_csv(
        &paths.plot_csv,
        report.rows.iter().map(|r| PlotPoint {
            threshold: r.threshold,
            normalized_return: r.mean_normalized_return,
            normalized_return_se: r.se_normalized_return,
            normalized_cost: r.mean_normalized_cost,
            normalized_cost_se: r.se_normalized_cost,
        }),
    )?;
    Ok(paths)
}

pub fn read_summary(path: &Path) -> Result<EvalSummary, ReportError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>, ReportError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}
