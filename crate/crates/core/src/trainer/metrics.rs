//! Metric records and their CSV form.
//!
//! Column order is fixed by [`COLUMNS`]. Fields that were not measured at a
//! step (evaluation between intervals, buffer columns outside a GRPO stage)
//! are written as empty cells. Wall-clock time is kept out of this file so
//! that identical runs produce identical bytes; see [`Timing`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column registry, in file order.
pub const COLUMNS: [(&str, &str); 17] = [
    ("step", "global optimizer step (0 = before training)"),
    ("stage", "stage name"),
    ("kind", "stage kind: init, sft, mpo or grpo"),
    ("reward_total", "mean total reward of fresh training samples"),
    ("reward_rule", "mean rule reward of fresh training samples"),
    ("reward_model", "mean model reward of fresh training samples"),
    ("reward_format", "mean format reward of fresh training samples"),
    ("loss", "training loss (negated objective for grpo)"),
    ("grad_norm", "gradient norm before clipping"),
    ("effective_fraction", "share of fresh rollout groups with a non-zero advantage"),
    ("batch_effective_fraction", "share of update-batch samples with a non-zero advantage, replays included"),
    ("clipped_fraction", "share of tokens on the clipped branch"),
    ("replayed", "replayed samples in the update batch"),
    ("buffer_size", "buffer entries after the step"),
    ("pairs", "preference pairs built this step"),
    ("eval_accuracy", "held-out greedy exact-match accuracy"),
    ("eval_format_ok_wrong", "held-out rate of well-formatted but wrong answers"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: String,
    pub kind: String,
    pub reward_total: Option<f64>,
    pub reward_rule: Option<f64>,
    pub reward_model: Option<f64>,
    pub reward_format: Option<f64>,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub effective_fraction: Option<f64>,
    pub batch_effective_fraction: Option<f64>,
    pub clipped_fraction: Option<f64>,
    pub replayed: Option<u64>,
    pub buffer_size: Option<u64>,
    pub pairs: Option<u64>,
    pub eval_accuracy: Option<f64>,
    pub eval_format_ok_wrong: Option<f64>,
}

impl MetricRecord {
    pub fn new(step: u64, stage: &str, kind: &str) -> Self {
        MetricRecord {
            step,
            stage: stage.to_string(),
            kind: kind.to_string(),
            reward_total: None,
            reward_rule: None,
            reward_model: None,
            reward_format: None,
            loss: None,
            grad_norm: None,
            effective_fraction: None,
            batch_effective_fraction: None,
            clipped_fraction: None,
            replayed: None,
            buffer_size: None,
            pairs: None,
            eval_accuracy: None,
            eval_format_ok_wrong: None,
        }
    }
}

pub fn header() -> Vec<&'static str> {
    COLUMNS.iter().map(|(n, _)| *n).collect()
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(header()).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a metrics file, rejecting any header that differs from [`COLUMNS`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let found: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if found.is_empty() || found.iter().all(|h| h.is_empty()) {
        return Ok(Vec::new());
    }
    if found != header() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!(
                "schema mismatch: expected columns [{}], found [{}]",
                header().join(","),
                found.join(",")
            ),
        });
    }
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec.map_err(|e| csv_error(path, e))?);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Wall-clock duration of one step, kept apart from the metric stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub step: u64,
    pub stage: String,
    pub seconds: f64,
}

pub fn write_timings(path: &Path, timings: &[Timing]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for t in timings {
        w.serialize(t).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
