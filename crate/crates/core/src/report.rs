//! Result files: `results.json`, `results.csv`, `activation_stats.csv` and
//! `config_resolved.json`, plus a plain-text activation chart.
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! reader never sees a half-written report. Nothing time-dependent is
//! recorded, which keeps `results.json` byte-identical across reruns.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ReportFormat};
use crate::error::{Error, Result};
use crate::experiment::{RunRecord, Suite};
use crate::layer::LayerStats;

pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_CSV: &str = "results.csv";
pub const ACTIVATION_CSV: &str = "activation_stats.csv";
pub const CONFIG_RESOLVED: &str = "config_resolved.json";

/// Label used in `activation_stats.csv` for the per-block row pooled over sublayers.
pub const POOLED: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub version: u32,
    /// `None` for a plain `run`.
    pub suite: Option<Suite>,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub cell: String,
    pub trainable_params: usize,
    pub target_loss: f64,
    pub source_loss: f64,
    pub forgetting_delta: f64,
    /// Semicolon-separated, one entry per block.
    pub mean_active_per_layer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRow {
    pub method: String,
    pub seed: u64,
    pub cell: String,
    pub layer: usize,
    /// A sublayer name, or [`POOLED`] for the whole block.
    pub sublayer: String,
    pub num_experts: usize,
    pub samples: u64,
    pub mean_active: f64,
    pub fallback_rate: f64,
    /// Per-expert selection frequency, semicolon-separated.
    pub utilization: String,
}

fn join(xs: impl IntoIterator<Item = f64>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn result_rows(records: &[RunRecord]) -> Vec<ResultRow> {
    records
        .iter()
        .map(|r| ResultRow {
            method: r.method.name().to_string(),
            seed: r.seed,
            cell: r.cell.clone(),
            trainable_params: r.trainable_params,
            target_loss: r.target_loss,
            source_loss: r.source_loss,
            forgetting_delta: r.forgetting_delta,
            mean_active_per_layer: join(r.mean_active_per_layer.iter().copied()),
        })
        .collect()
}

fn activation_row(r: &RunRecord, layer: usize, sublayer: String, stats: &LayerStats) -> ActivationRow {
    let n = stats.samples_seen.max(1) as f64;
    ActivationRow {
        method: r.method.name().to_string(),
        seed: r.seed,
        cell: r.cell.clone(),
        layer,
        sublayer,
        num_experts: stats.selection_counts.len(),
        samples: stats.samples_seen,
        mean_active: stats.mean_active(),
        fallback_rate: stats.fallback_hits as f64 / n,
        utilization: join(stats.utilization().as_slice().iter().copied()),
    }
}

/// One row per wrapped sublayer, then one pooled row per block.
///
/// Full fine-tuning has no gates and contributes no rows.
pub fn activation_rows(records: &[RunRecord]) -> Vec<ActivationRow> {
    let mut out = Vec::new();
    for r in records {
        let stats = &r.report.layer_stats;
        for s in stats {
            out.push(activation_row(r, s.layer, s.sublayer.name().to_string(), &s.stats));
        }
        let layers = stats.iter().map(|s| s.layer + 1).max().unwrap_or(0);
        for layer in 0..layers {
            let mut pooled = LayerStats::default();
            for s in stats.iter().filter(|s| s.layer == layer) {
                pooled.merge(&s.stats);
            }
            out.push(activation_row(r, layer, POOLED.to_string(), &pooled));
        }
    }
    out
}

/// Horizontal bars of mean active experts, scaled so a full bar means all `N` experts.
pub fn bar_chart(rows: &[ActivationRow]) -> String {
    const WIDTH: usize = 40;
    let mut out = String::new();
    let mut current: Option<(&str, u64, &str)> = None;
    for row in rows {
        let key = (row.method.as_str(), row.seed, row.cell.as_str());
        if current != Some(key) {
            let cell = if row.cell.is_empty() {
                String::new()
            } else {
                format!(" {}", row.cell)
            };
            let _ = writeln!(out, "{} seed={}{} (N={})", row.method, row.seed, cell, row.num_experts);
            current = Some(key);
        }
        let frac = if row.num_experts == 0 {
            0.0
        } else {
            (row.mean_active / row.num_experts as f64).clamp(0.0, 1.0)
        };
        let filled = (frac * WIDTH as f64).round() as usize;
        let _ = writeln!(
            out,
            "  L{:<2} {:<5} |{}{}| {:.3}",
            row.layer,
            row.sublayer,
            "#".repeat(filled),
            " ".repeat(WIDTH - filled),
            row.mean_active
        );
    }
    out
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn results_json(records: &[RunRecord], suite: Option<Suite>) -> Result<String> {
    let file = ResultsFile {
        version: 1,
        suite,
        records: records.to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

/// Writes every report file into `dir`, creating it if needed. Returns the paths written.
pub fn write_reports(
    dir: &Path,
    cfg: &ExperimentConfig,
    records: &[RunRecord],
    suite: Option<Suite>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
        Ok(())
    };
    if cfg.report_formats.contains(&ReportFormat::Json) {
        put(RESULTS_JSON, results_json(records, suite)?.into_bytes())?;
    }
    if cfg.report_formats.contains(&ReportFormat::Csv) {
        put(RESULTS_CSV, csv_bytes(&result_rows(records))?)?;
    }
    put(ACTIVATION_CSV, csv_bytes(&activation_rows(records))?)?;
    let mut resolved = cfg.to_json()?;
    resolved.push('\n');
    put(CONFIG_RESOLVED, resolved.into_bytes())?;
    Ok(written)
}

/// Reads `results.json` back from a results directory.
pub fn load_results(dir: &Path) -> Result<ResultsFile> {
    let path = dir.join(RESULTS_JSON);
    if !path.is_file() {
        return Err(Error::MissingResults(dir.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Rewrites `activation_stats.csv` from `results.json` and returns the chart.
pub fn write_stats(dir: &Path) -> Result<String> {
    let results = load_results(dir)?;
    let rows = activation_rows(&results.records);
    write_atomic(&dir.join(ACTIVATION_CSV), &csv_bytes(&rows)?)?;
    Ok(bar_chart(&rows))
}

pub fn read_activation_csv(path: &Path) -> Result<Vec<ActivationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
