//! Per-epoch JSON-lines logs, run summaries and the optional timing file.

use std::fs;
use std::path::Path;

use cist_core::distill::RunRecord;
use cist_core::Method;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::fmt_f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub best_val_epoch: usize,
    pub final_test_accuracy: f64,
    pub entropy_outliers: Option<usize>,
}

impl From<&RunRecord> for RunSummary {
    fn from(r: &RunRecord) -> Self {
        Self {
            method: r.method,
            seed: r.seed,
            epochs: r.epochs.len(),
            best_val_epoch: r.best_val_epoch,
            final_test_accuracy: r.final_test_accuracy,
            entropy_outliers: r.entropy_outliers,
        }
    }
}

/// One compact JSON object per epoch. Wall-clock time is not included.
pub fn render_log(record: &RunRecord) -> String {
    let mut out = String::new();
    for e in &record.epochs {
        out.push_str(&serde_json::to_string(e).expect("epoch records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_log(path: &Path, record: &RunRecord) -> Result<()> {
    fs::write(path, render_log(record)).map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, record: &RunRecord) -> Result<()> {
    write_json(path, &RunSummary::from(record))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_timing(path: &Path, record: &RunRecord) -> Result<()> {
    let mut out = String::from("epoch,wall_secs\n");
    for e in &record.epochs {
        out.push_str(&format!("{},{}\n", e.epoch, fmt_f64(e.wall_secs)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<cist_core::distill::EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                column: e.column(),
                offset: 0,
                message: e.to_string(),
            })
        })
        .collect()
}
