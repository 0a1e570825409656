//! One-axis sweeps: a run per value, failures recorded, a table and a plot at the end.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use log::{error, info};
use serde::Serialize;
use serde_json::Value;

use rna_core::metrics::{dsv, pct, text_table, MetricsReport};

use crate::config::{set_path, ExperimentConfig};
use crate::run::{execute, Action, RunDir};
use crate::svg::{line_chart, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Axis {
    /// `loss.lambda`
    Lambda,
    /// `dataset.imbalance_ratio`
    ImbalanceRatio,
    /// OOD rows per ID row; sets `train.batch_ood = round(value * train.batch_id)`.
    BatchRatio,
    /// `dataset.aux.size`
    AuxSize,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::ImbalanceRatio => "imbalance_ratio",
            Axis::BatchRatio => "batch_ratio",
            Axis::AuxSize => "aux_size",
        }
    }

    /// Applies `value` to a config tree.
    fn apply(self, tree: &mut Value, base: &ExperimentConfig, value: f64) -> Result<()> {
        let (path, v) = match self {
            Axis::Lambda => ("loss.lambda", Value::from(value)),
            Axis::ImbalanceRatio => ("dataset.imbalance_ratio", Value::from(value)),
            Axis::BatchRatio => {
                let rows = value * base.train.batch_id as f64;
                if !(rows >= 0.0) || !rows.is_finite() {
                    bail!("batch ratio {value} must be a finite value >= 0");
                }
                ("train.batch_ood", Value::from(rows.round() as u64))
            }
            Axis::AuxSize => {
                if !(value >= 0.0) || value.fract() != 0.0 {
                    bail!("aux size {value} must be a non-negative integer");
                }
                ("dataset.aux.size", Value::from(value as u64))
            }
        };
        set_path(tree, path, v)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub run_id: String,
    pub outcome: std::result::Result<MetricsReport, String>,
}

fn run_id_for(base: &str, axis: Axis, raw: &str) -> String {
    let v: String = raw.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
    format!("{base}-{}-{v}", axis.name())
}

/// Runs every value; returns the points and whether any failed.
pub fn sweep(base: &ExperimentConfig, axis: Axis, values: &[String], output_root: &Path, force: bool) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let mut points = Vec::new();
    for raw in values {
        let run_id = run_id_for(&base.run_id, axis, raw);
        let parsed: Result<f64> = raw.trim().parse::<f64>().with_context(|| format!("{raw:?} is not a number"));
        let outcome = parsed.and_then(|value| {
            let mut tree = base.to_value();
            axis.apply(&mut tree, base, value)?;
            set_path(&mut tree, "run_id", Value::from(run_id.clone()))?;
            let cfg = ExperimentConfig::from_value(tree)?;
            info!("sweep {}={raw}: run {run_id}", axis.name());
            let report = execute(&cfg, &RunDir::new(output_root.join(&run_id)), Action::Full, force)?;
            Ok((value, report.expect("full runs evaluate")))
        });
        match outcome {
            Ok((value, report)) => points.push(SweepPoint {
                value,
                run_id,
                outcome: Ok(report),
            }),
            Err(e) => {
                error!("sweep {}={raw} failed: {e:#}", axis.name());
                points.push(SweepPoint {
                    value: raw.trim().parse().unwrap_or(f64::NAN),
                    run_id,
                    outcome: Err(format!("{e:#}")),
                });
            }
        }
    }
    Ok(points)
}

/// `sweep.tsv`, `sweep.txt`, `sweep.json` and `sweep.svg` in `out`.
pub fn write_sweep(points: &[SweepPoint], axis: Axis, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let scorers: Vec<String> = {
        let mut s: Vec<String> = points
            .iter()
            .filter_map(|p| p.outcome.as_ref().ok())
            .flat_map(|r| r.averages.keys().cloned())
            .collect();
        s.sort();
        s.dedup();
        s
    };
    let mut header = vec![axis.name().to_string(), "run".into(), "status".into()];
    for s in &scorers {
        header.extend([format!("{s} AUC"), format!("{s} AUPR"), format!("{s} FPR95")]);
    }
    header.extend(["ACC", "Many", "Medium", "Few", "error"].map(String::from));
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let mut row = vec![format!("{}", p.value), p.run_id.clone()];
            match &p.outcome {
                Ok(r) => {
                    row.push("ok".into());
                    for s in &scorers {
                        match r.averages.get(s) {
                            Some(m) => row.extend([pct(m.auc), pct(m.aupr), pct(m.fpr95)]),
                            None => row.extend(["-".into(), "-".into(), "-".into()]),
                        }
                    }
                    let a = &r.accuracy;
                    row.extend([pct(a.total), pct(a.many), pct(a.medium), pct(a.few), String::new()]);
                }
                Err(e) => {
                    row.push("failed".into());
                    row.extend(std::iter::repeat_n("-".to_string(), 3 * scorers.len() + 4));
                    row.push(e.replace(['\t', '\n'], " "));
                }
            }
            row
        })
        .collect();
    fs::write(out.join("sweep.tsv"), dsv(&header, &rows, '\t'))?;
    fs::write(out.join("sweep.txt"), text_table(&header, &rows))?;
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(points)? + "\n")?;
    let series: Vec<Series> = scorers
        .iter()
        .map(|s| Series {
            name: format!("{s} AUC"),
            points: points
                .iter()
                .filter_map(|p| p.outcome.as_ref().ok().and_then(|r| r.averages.get(s)).map(|m| (p.value, 100.0 * m.auc)))
                .collect(),
        })
        .collect();
    fs::write(
        out.join("sweep.svg"),
        line_chart(&format!("Mean OOD AUC over {}", axis.name()), axis.name(), "AUC (%)", &series),
    )?;
    Ok(())
}
