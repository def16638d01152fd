//! Run directory artefacts: the manifest and CSV tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lqmfg::{LoopReport, NeGapEstimate};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

/// Everything needed to rerun a command; stored as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// File names relative to the run directory.
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// A run directory that collects the names of the files written into it.
pub struct RunDir {
    root: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.root.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).expect("report serializes to JSON");
        self.write_text(name, &(text + "\n"))
    }

    pub fn write_csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.path(name);
        let err = |e: csv::Error| CliError::Usage(format!("cannot write {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        w.write_record(header).map_err(err)?;
        for row in rows {
            w.write_record(row).map_err(err)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))
    }

    /// Writes the resolved configuration and the manifest.
    pub fn finish(mut self, command: &str, config: &RunConfig, started_unix: u64) -> Result<(), CliError> {
        self.write_text("config.toml", &config.to_toml())?;
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.seed,
            config: config.clone(),
            artifacts: self.artifacts.clone(),
            started_unix,
            finished_unix: unix_now(),
        };
        self.write_json("manifest.json", &manifest)
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn matrix_header(prefix: &str, rows: &[Vec<f64>]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        for j in 0..row.len() {
            out.push(format!("{prefix}[{i}][{j}]"));
        }
    }
    out
}

fn matrix_cells(rows: &[Vec<f64>]) -> impl Iterator<Item = String> + '_ {
    rows.iter().flatten().map(|&x| num(x))
}

/// `rounds.csv`: r, entries of the round's output F, F error, inner cost gap.
pub fn rounds_table(report: &LoopReport) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["r".to_string()];
    header.extend(matrix_header("F", &report.final_f));
    header.extend(["F_error".to_string(), "inner_cost_gap".to_string()]);
    let rows = report
        .rounds
        .iter()
        .map(|rec| {
            let mut row = vec![rec.r.to_string()];
            row.extend(matrix_cells(&rec.f_out));
            row.push(opt(rec.f_error));
            row.push(opt(rec.inner_cost_gap));
            row
        })
        .collect();
    (header, rows)
}

/// `diagnostics.csv`: one row per inner iteration.
pub fn diagnostics_table(report: &LoopReport) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["r", "s", "est_cost", "theta_norm", "grad_norm", "safeguard_flag"]
        .map(String::from)
        .to_vec();
    let rows = report
        .diagnostics
        .iter()
        .map(|d| {
            vec![
                d.r.to_string(),
                d.inner.s.to_string(),
                num(d.inner.est_cost),
                num(d.inner.theta_norm),
                num(d.inner.grad_norm),
                u8::from(d.inner.safeguard_flag).to_string(),
            ]
        })
        .collect();
    (header, rows)
}

/// Gap table; `R` is empty for the exact equilibrium.
pub fn gap_table(rows: &[NeGapEstimate]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["N", "R", "deployed", "deployed_se", "bestresp", "bestresp_se", "gap", "gap_se"]
        .map(String::from)
        .to_vec();
    let mut sorted: Vec<&NeGapEstimate> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.r.unwrap_or(usize::MAX), r.n));
    let body = sorted
        .into_iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.r.map(|v| v.to_string()).unwrap_or_default(),
                num(r.deployed),
                num(r.deployed_se),
                num(r.best_response),
                num(r.best_response_se),
                num(r.gap),
                num(r.gap_se),
            ]
        })
        .collect();
    (header, body)
}
