//! Report emission: one JSON report per run plus plot-ready CSV tables.
//!
//! Reports from identical (config, seed) are byte-identical except for the
//! two volatile metadata fields `timestamp_unix` and `runtime_seconds`;
//! everything else is derived deterministically, and replica aggregation
//! happens in replica order regardless of the worker pool.

use serde::Serialize;
use soshydro_core::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            // Inconclusive is not a pass: scripts gating on the exit code
            // must not mistake it for one. The report records the difference.
            Verdict::Fail | Verdict::Inconclusive => 1,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Meta {
    pub code_version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub timestamp_unix: u64,
    pub runtime_seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub report_version: u32,
    pub experiment: &'static str,
    pub verdict: Verdict,
    /// Human-readable tolerance violations; empty on pass.
    pub failures: Vec<String>,
    /// Non-fatal observations (poor fits, clamped interpolation, ...).
    pub flags: Vec<String>,
    pub meta: Meta,
    pub results: serde_json::Value,
}

/// What an experiment hands back to `main`.
#[derive(Debug)]
pub struct Outcome {
    pub verdict: Verdict,
    pub failures: Vec<String>,
    pub flags: Vec<String>,
    pub results: serde_json::Value,
}

impl Outcome {
    pub fn from_failures(failures: Vec<String>, flags: Vec<String>, results: serde_json::Value) -> Self {
        let verdict = if failures.is_empty() { Verdict::Pass } else { Verdict::Fail };
        Self { verdict, failures, flags, results }
    }
}

pub fn write_report(out_dir: &Path, report: &Report) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::InvalidParameter(format!("cannot create {}: {e}", out_dir.display())))?;
    let path = out_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Numerical(format!("report serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text)
        .map_err(|e| Error::InvalidParameter(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

/// Writes a CSV with `{:?}`-formatted cells (shortest float round-trip, so
/// the file is deterministic and loads back exactly). The first line is a
/// `# config <hash>` comment tying the artifact back to the run's config.
pub fn write_csv(
    out_dir: &Path,
    name: &str,
    config_hash: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::InvalidParameter(format!("cannot create {}: {e}", out_dir.display())))?;
    let path = out_dir.join(name);
    let mut text = String::new();
    text.push_str(&format!("# config {config_hash}\n"));
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(&path, text)
        .map_err(|e| Error::InvalidParameter(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
