use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::metrics::MetricRecord;
use super::{run_pipeline, RunOutput};

/// Headline numbers of one metric stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub records: usize,
    pub last_step: u64,
    pub final_accuracy: Option<f64>,
    pub final_format_ok_wrong: Option<f64>,
    pub mean_effective_fraction: Option<f64>,
    pub mean_batch_effective_fraction: Option<f64>,
    /// First step whose held-out accuracy reached 0.9.
    pub steps_to_90: Option<u64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl RunSummary {
    pub fn from_metrics(metrics: &[MetricRecord]) -> Self {
        let last_eval = metrics.iter().rev().find(|r| r.eval_accuracy.is_some());
        RunSummary {
            records: metrics.len(),
            last_step: metrics.last().map_or(0, |r| r.step),
            final_accuracy: last_eval.and_then(|r| r.eval_accuracy),
            final_format_ok_wrong: last_eval.and_then(|r| r.eval_format_ok_wrong),
            mean_effective_fraction: mean(metrics.iter().filter_map(|r| r.effective_fraction)),
            mean_batch_effective_fraction: mean(
                metrics.iter().filter_map(|r| r.batch_effective_fraction),
            ),
            steps_to_90: steps_to_accuracy(metrics, 0.9),
        }
    }
}

pub fn steps_to_accuracy(metrics: &[MetricRecord], target: f64) -> Option<u64> {
    metrics
        .iter()
        .find(|r| r.eval_accuracy.is_some_and(|a| a >= target))
        .map(|r| r.step)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub name: String,
    pub seed: u64,
    pub summary: Option<RunSummary>,
    /// Why the cell failed, if it did.
    pub error: Option<String>,
    #[serde(skip)]
    pub metrics: Vec<MetricRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, name: &str, seed: u64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.name == name && c.seed == seed)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "cell",
            "seed",
            "status",
            "final_eval_accuracy",
            "final_eval_format_ok_wrong",
            "mean_effective_fraction",
            "mean_batch_effective_fraction",
            "steps_to_90",
        ])
        .map_err(|e| Error::Runtime(e.to_string()))?;
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for c in &self.cells {
            let s = c.summary.as_ref();
            let status = match &c.error {
                Some(e) => format!("failed: {e}"),
                None => "ok".to_string(),
            };
            w.write_record([
                c.name.clone(),
                c.seed.to_string(),
                status,
                f(s.and_then(|s| s.final_accuracy)),
                f(s.and_then(|s| s.final_format_ok_wrong)),
                f(s.and_then(|s| s.mean_effective_fraction)),
                f(s.and_then(|s| s.mean_batch_effective_fraction)),
                s.and_then(|s| s.steps_to_90).map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(|e| Error::Runtime(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Runtime(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Runtime(e.to_string()))
    }
}

/// Runs every named config under every seed. A failing cell is recorded and
/// does not stop the others.
pub fn run_ablation(matrix: &[(String, TrainConfig)], seeds: &[u64]) -> Result<AblationReport> {
    if matrix.is_empty() {
        return Err(Error::input("ablation matrix is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::input("ablation needs at least one seed"));
    }
    let mut cells = Vec::new();
    for (name, config) in matrix {
        for &seed in seeds {
            let mut c = config.clone();
            c.seed = seed;
            let outcome = catch_unwind(AssertUnwindSafe(|| run_pipeline(&c)));
            let cell = match outcome {
                Ok(Ok(out)) => finished_cell(name, seed, out),
                Ok(Err(e)) => failed_cell(name, seed, e.to_string(), Vec::new()),
                Err(_) => failed_cell(name, seed, "run panicked".to_string(), Vec::new()),
            };
            cells.push(cell);
        }
    }
    Ok(AblationReport { cells })
}

fn finished_cell(name: &str, seed: u64, out: RunOutput) -> AblationCell {
    let summary = Some(RunSummary::from_metrics(&out.metrics));
    AblationCell {
        name: name.to_string(),
        seed,
        summary,
        error: out.failure,
        metrics: out.metrics,
    }
}

fn failed_cell(name: &str, seed: u64, error: String, metrics: Vec<MetricRecord>) -> AblationCell {
    AblationCell {
        name: name.to_string(),
        seed,
        summary: None,
        error: Some(error),
        metrics,
    }
}
