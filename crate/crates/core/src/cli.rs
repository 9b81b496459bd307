//! Command-line entry point.
//!
//! `run` executes a configured pipeline and writes its outputs to a
//! directory; `report` summarizes one or more metrics files.
//!
//! Run directory layout:
//!
//! | file | contents |
//! |------|----------|
//! | `manifest.toml` | fully resolved config; runnable as `--config` |
//! | `metrics.csv` | one row per optimizer step, columns per [`COLUMNS`] |
//! | `timings.csv` | wall-clock seconds per step |
//! | `checkpoints/<stage>.ckpt` | parameters after each completed stage |
//! | `pairs.jsonl`, `rollouts.jsonl`, `buffer.jsonl` | shared-format records |
//! | `failure.txt` | present only when a stage failed |

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::policy::save_checkpoint;
use crate::records::write_records;
use crate::trainer::metrics::write_timings;
use crate::trainer::{
    read_metrics, run_pipeline, write_metrics, RunSummary, StageKind, TrainConfig, COLUMNS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hybridrl", version, about = "Staged preference and group-relative RL on toy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured pipeline.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Stages that stage-scoped flags such as `--ssb` apply to; every
        /// GRPO stage when omitted.
        #[arg(long = "stage", value_name = "NAME")]
        stages: Vec<String>,
        /// Enable or disable the selective sample buffer.
        #[arg(long)]
        ssb: Option<Switch>,
        /// Dotted `key=value` override, e.g. `stages.grpo.steps=50`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Summarize metrics files and write plot-ready series.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), executes the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            stages,
            ssb,
            overrides,
        } => resolve_config(&config, seed, &stages, ssb, &overrides).and_then(|c| cmd_run(&c, &out)),
        Command::Report { files, out } => cmd_report(&files, out.as_deref()).map(|table| {
            print!("{table}");
            EXIT_OK
        }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Runtime(_) => EXIT_RUNTIME,
                _ => EXIT_USAGE,
            }
        }
    }
}

/// Loads a config and applies command-line overrides in a fixed order:
/// generic overrides, then the buffer switch, then the seed.
fn resolve_config(
    path: &Path,
    seed: Option<u64>,
    stages: &[String],
    ssb: Option<Switch>,
    overrides: &[String],
) -> Result<TrainConfig> {
    let base = TrainConfig::load(path, overrides)?;
    let mut extra = overrides.to_vec();
    if let Some(switch) = ssb {
        let targets: Vec<String> = if stages.is_empty() {
            base.stages
                .iter()
                .filter(|s| s.kind == StageKind::Grpo)
                .map(|s| s.name.clone())
                .collect()
        } else {
            stages.to_vec()
        };
        for name in &targets {
            match base.stages.iter().find(|s| &s.name == name) {
                Some(s) if s.kind == StageKind::Grpo => {}
                Some(_) => {
                    return Err(Error::config(
                        format!("stages.{name}"),
                        "--ssb applies to grpo stages only",
                    ))
                }
                None => return Err(Error::config("stages", format!("no stage named `{name}`"))),
            }
            extra.push(format!(
                "stages.{name}.buffer.enabled={}",
                switch == Switch::On
            ));
        }
    } else if let Some(name) = stages.first() {
        return Err(Error::config(
            format!("stages.{name}"),
            "--stage needs a stage-scoped flag such as --ssb",
        ));
    }
    if let Some(seed) = seed {
        extra.push(format!("seed={seed}"));
    }
    TrainConfig::load(path, &extra)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs a resolved config and writes every output into `out`.
pub fn cmd_run(config: &TrainConfig, out: &Path) -> Result<i32> {
    create_dir(out)?;
    let manifest = format!(
        "# hybridrl {}\n{}",
        env!("CARGO_PKG_VERSION"),
        config.to_toml()?
    );
    write_text(&out.join("manifest.toml"), &manifest)?;
    let failure_path = out.join("failure.txt");
    if failure_path.exists() {
        std::fs::remove_file(&failure_path).map_err(|e| Error::io(&failure_path, e))?;
    }

    let result = run_pipeline(config)?;
    write_metrics(&out.join("metrics.csv"), &result.metrics)?;
    write_timings(&out.join("timings.csv"), &result.timings)?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    for (name, params) in &result.stage_params {
        save_checkpoint(params, &ckpt_dir.join(format!("{name}.ckpt")))?;
    }
    write_records(&out.join("pairs.jsonl"), &result.pairs)?;
    write_records(&out.join("rollouts.jsonl"), &result.rollouts)?;
    write_records(&out.join("buffer.jsonl"), &result.buffer_dump)?;
    log::info!(
        "{} metric records, {} gradient checks passed",
        result.metrics.len(),
        result.checks_passed
    );

    match result.failure {
        Some(f) => {
            write_text(&failure_path, &format!("{f}\n"))?;
            eprintln!("error: {f}");
            Ok(EXIT_RUNTIME)
        }
        None => {
            println!("{}", out.display());
            Ok(EXIT_OK)
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn delta(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(a), Some(b)) => format!("{:+.4}", b - a),
        _ => "-".to_string(),
    }
}

/// Renders the comparison table for the given metrics files and, with `out`,
/// writes one `step,value` series per file and numeric column.
///
/// With two or more files, each later row is followed by its deltas against
/// the first file.
pub fn cmd_report(files: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let mut runs = Vec::new();
    for f in files {
        let metrics = read_metrics(f)?;
        if metrics.is_empty() {
            return Err(Error::input(format!("{}: no records", f.display())));
        }
        runs.push((f, metrics));
    }

    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<32} {:>8} {:>10} {:>10} {:>10} {:>10} {:>8}",
        "run", "records", "accuracy", "fmt_wrong", "eff", "batch_eff", "to_90"
    );
    let summaries: Vec<RunSummary> = runs.iter().map(|(_, m)| RunSummary::from_metrics(m)).collect();
    let first = &summaries[0];
    for ((f, _), s) in runs.iter().zip(&summaries) {
        let _ = writeln!(
            table,
            "{:<32} {:>8} {:>10} {:>10} {:>10} {:>10} {:>8}",
            f.display(),
            s.records,
            cell(s.final_accuracy),
            cell(s.final_format_ok_wrong),
            cell(s.mean_effective_fraction),
            cell(s.mean_batch_effective_fraction),
            s.steps_to_90.map_or_else(|| "-".to_string(), |v| v.to_string()),
        );
        if runs.len() > 1 && !std::ptr::eq(s, first) {
            let steps = match (first.steps_to_90, s.steps_to_90) {
                (Some(a), Some(b)) => format!("{:+}", b as i64 - a as i64),
                _ => "-".to_string(),
            };
            let _ = writeln!(
                table,
                "{:<32} {:>8} {:>10} {:>10} {:>10} {:>10} {:>8}",
                "  delta vs first",
                "",
                delta(first.final_accuracy, s.final_accuracy),
                delta(first.final_format_ok_wrong, s.final_format_ok_wrong),
                delta(first.mean_effective_fraction, s.mean_effective_fraction),
                delta(first.mean_batch_effective_fraction, s.mean_batch_effective_fraction),
                steps,
            );
        }
    }

    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("summary.txt"), &table)?;
        for (i, (f, metrics)) in runs.iter().enumerate() {
            let stem = f
                .parent()
                .and_then(|p| p.file_name())
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".to_string());
            write_series(dir, &format!("{i}_{stem}"), metrics)?;
        }
    }
    Ok(table)
}

fn write_series(dir: &Path, prefix: &str, metrics: &[crate::trainer::MetricRecord]) -> Result<()> {
    let rows: Vec<serde_json::Value> = metrics
        .iter()
        .map(|r| serde_json::to_value(r).map_err(|e| Error::Runtime(e.to_string())))
        .collect::<Result<_>>()?;
    for (column, _) in COLUMNS.iter().skip(3) {
        let points: Vec<(u64, f64)> = metrics
            .iter()
            .zip(&rows)
            .filter_map(|(r, v)| v.get(*column).and_then(|x| x.as_f64()).map(|x| (r.step, x)))
            .collect();
        if points.is_empty() {
            continue;
        }
        let mut text = String::from("step,value\n");
        for (s, v) in points {
            let _ = writeln!(text, "{s},{v}");
        }
        write_text(&dir.join(format!("{prefix}.{column}.csv")), &text)?;
    }
    Ok(())
}
