//! Side-by-side report of two completed runs.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::run::{read_metrics, MetricsRow, Summary};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunDigest {
    pub dir: PathBuf,
    /// From `summary.json` when present.
    pub algorithm: Option<String>,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub upload_bytes: u64,
    pub total_bytes: u64,
}

impl RunDigest {
    pub fn from_rows(dir: &Path, algorithm: Option<String>, rows: &[MetricsRow]) -> Result<Self> {
        let Some(last) = rows.last() else {
            bail!("{}: metrics.csv has no rows", dir.display());
        };
        let mut cum = 0u64;
        for r in rows {
            cum += r.upload_bytes + r.download_bytes;
            if cum != r.cum_bytes {
                bail!(
                    "{}: round {} has cum_bytes {} but the running sum is {}",
                    dir.display(),
                    r.round,
                    r.cum_bytes,
                    cum
                );
            }
        }
        Ok(RunDigest {
            dir: dir.to_path_buf(),
            algorithm,
            rounds: last.round,
            final_accuracy: last.accuracy,
            upload_bytes: rows.iter().map(|r| r.upload_bytes).sum(),
            total_bytes: last.cum_bytes,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let rows = read_metrics(&dir.join("metrics.csv"))?;
        let summary = dir.join("summary.json");
        let algorithm = if summary.exists() {
            let text = std::fs::read_to_string(&summary).with_context(|| format!("reading {}", summary.display()))?;
            let s: Summary = serde_json::from_str(&text).with_context(|| format!("parsing {}", summary.display()))?;
            Some(s.algorithm.as_str().to_string())
        } else {
            None
        };
        Self::from_rows(dir, algorithm, &rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub a: RunDigest,
    pub b: RunDigest,
    /// `100 · (acc_b − acc_a)`.
    pub accuracy_gap_points: f64,
    /// `100 · (1 − total_b / total_a)`.
    pub transmission_reduction_percent: f64,
    /// `100 · (1 − upload_b / upload_a)`.
    pub upload_reduction_percent: f64,
}

fn reduction(a: u64, b: u64) -> f64 {
    if a == 0 {
        0.0
    } else {
        100.0 * (1.0 - b as f64 / a as f64)
    }
}

impl Comparison {
    pub fn new(a: RunDigest, b: RunDigest) -> Self {
        Comparison {
            accuracy_gap_points: 100.0 * (b.final_accuracy - a.final_accuracy),
            transmission_reduction_percent: reduction(a.total_bytes, b.total_bytes),
            upload_reduction_percent: reduction(a.upload_bytes, b.upload_bytes),
            a,
            b,
        }
    }
}

pub fn compare(a: &Path, b: &Path) -> Result<Comparison> {
    Ok(Comparison::new(RunDigest::load(a)?, RunDigest::load(b)?))
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (tag, d) in [("A", &self.a), ("B", &self.b)] {
            writeln!(
                f,
                "{tag}: {} [{}] rounds={} final_accuracy={:.4} upload_bytes={} total_bytes={}",
                d.dir.display(),
                d.algorithm.as_deref().unwrap_or("?"),
                d.rounds,
                d.final_accuracy,
                d.upload_bytes,
                d.total_bytes
            )?;
        }
        writeln!(f, "accuracy gap (B - A): {:+.2} points", self.accuracy_gap_points)?;
        writeln!(f, "upload reduction (B vs A): {:.2}%", self.upload_reduction_percent)?;
        write!(f, "total transmission reduction (B vs A): {:.2}%", self.transmission_reduction_percent)
    }
}
