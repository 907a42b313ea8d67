//! Machine-readable outputs. Field order is declaration order, so reruns
//! produce identical bytes.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleReport {
    pub path: String,
    pub t_m: f64,
    pub r_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    pub median_t_m: f64,
    pub median_r_deg: f64,
    #[serde(rename = "acc@thresh")]
    pub acc: f64,
    pub t_thresh_m: f64,
    pub r_thresh_deg: f64,
    pub per_sample: Vec<SampleReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TurnReport {
    /// Rotation `steps / order` of a full turn.
    pub steps: usize,
    pub order: usize,
    pub degrees: f64,
    /// One entry per activation layer.
    pub layers: Vec<f64>,
    pub end_to_end: f64,
    /// `PASS` or `FAIL` at quarter turns, `n/a` elsewhere.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub group: usize,
    pub preset: String,
    pub tolerance: f64,
    pub samples: usize,
    pub side: usize,
    pub turns: Vec<TurnReport>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub widths: Vec<usize>,
    pub backbone_params: usize,
    pub total_params: usize,
    pub final_loss: f64,
    pub acc: f64,
    pub median_t: f64,
    pub median_r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub preset: String,
    pub epochs: usize,
    pub t_thresh_m: f64,
    pub r_thresh_deg: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub rows: Vec<SweepRow>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Invalid(e.to_string()))?;
    text.push('\n');
    write(path, text.as_bytes())
}

/// Writes a header line and rows of already formatted fields.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    write(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write(path, bytes)
}
