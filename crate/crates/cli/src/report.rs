//! Cross-run comparison tables and figures, computed from run artifacts only.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::Value;

use rna_core::metrics::{dsv, pct, text_table, MetricsReport};
use rna_core::training::NormStats;

use crate::config::ExperimentConfig;
use crate::svg::{histogram_chart, line_chart, Series};

/// One finished run as read back from disk.
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub report: MetricsReport,
    pub norms: Option<NormStats>,
    /// Raw epoch records; non-finite numbers were written as `null`.
    pub epochs: Vec<Value>,
}

impl RunArtifacts {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(&dir.join("config.toml")).with_context(|| format!("run {}", dir.display()))?;
        let report_path = dir.join("eval").join("report.json");
        let report = serde_json::from_str(
            &fs::read_to_string(&report_path).with_context(|| format!("{} is not evaluated", dir.display()))?,
        )
        .with_context(|| format!("unreadable {}", report_path.display()))?;
        let norms_path = dir.join("eval").join("norms.json");
        let norms = if norms_path.exists() {
            Some(serde_json::from_str(&fs::read_to_string(&norms_path)?)?)
        } else {
            None
        };
        let epochs_path = dir.join("records").join("epochs.jsonl");
        let epochs = if epochs_path.exists() {
            fs::read_to_string(&epochs_path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            report,
            norms,
            epochs,
        })
    }

    pub fn name(&self) -> &str {
        &self.config.run_id
    }
}

fn num(v: &Value, path: &[&str]) -> f64 {
    let mut cur = v;
    for p in path {
        match cur.get(p) {
            Some(n) => cur = n,
            None => return f64::NAN,
        }
    }
    cur.as_f64().unwrap_or(f64::NAN)
}

fn safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub const COMPARISON_HEADER: [&str; 10] = ["run", "method", "scorer", "AUC", "AUPR", "FPR95", "ACC", "Many", "Medium", "Few"];

/// Run × scorer rows of OOD-set-averaged metrics and grouped accuracy.
pub fn comparison_rows(runs: &[RunArtifacts]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in runs {
        let acc = &r.report.accuracy;
        for (scorer, m) in &r.report.averages {
            rows.push(vec![
                r.name().to_string(),
                r.config.loss.method_name(),
                scorer.clone(),
                pct(m.auc),
                pct(m.aupr),
                pct(m.fpr95),
                pct(acc.total),
                pct(acc.many),
                pct(acc.medium),
                pct(acc.few),
            ]);
        }
    }
    rows
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

const DYNAMICS: [(&str, &[&str]); 9] = [
    ("mean_loss", &["mean_loss"]),
    ("lr", &["lr"]),
    ("id_train_head_norm", &["probe", "id_train_head_norm"]),
    ("id_train_tail_norm", &["probe", "id_train_tail_norm"]),
    ("id_test_norm", &["probe", "id_test_norm"]),
    ("ood_train_norm", &["probe", "ood_train_norm"]),
    ("ood_test_norm", &["probe", "ood_test_norm"]),
    ("id_activation_ratio", &["probe", "id_activation_ratio"]),
    ("bn_gap_ratio", &["probe", "bn_gap_ratio"]),
];

/// Writes the comparison, histograms, dynamics and gradient-ratio outputs into `out`.
pub fn write_report(runs: &[RunArtifacts], out: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        bail!("report needs at least one run directory");
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };

    let header: Vec<String> = COMPARISON_HEADER.iter().map(|s| s.to_string()).collect();
    let rows = comparison_rows(runs);
    put("comparison.tsv".into(), dsv(&header, &rows, '\t'))?;
    put("comparison.txt".into(), text_table(&header, &rows))?;

    // representation-norm histograms: ID test against each OOD split
    for r in runs {
        let Some(norms) = &r.norms else { continue };
        let Some(id) = norms.histograms.get("id_test") else { continue };
        let mut raw = String::from("split,bin_lo,bin_hi,count\n");
        for (split, h) in &norms.histograms {
            let e = h.edges();
            for (i, c) in h.counts.iter().enumerate() {
                raw.push_str(&format!("{split},{:?},{:?},{c}\n", e[i], e[i + 1]));
            }
        }
        put(format!("norms_{}.csv", safe(r.name())), raw)?;
        for (split, h) in norms.histograms.iter().filter(|(k, _)| k.starts_with("ood_")) {
            let label = split.trim_start_matches("ood_test/");
            let svg = histogram_chart(
                &format!("{}: ||f(x)|| ID test vs {label}", r.name()),
                "representation norm",
                &id.edges(),
                &[("ID test".into(), id.counts.clone()), (label.to_string(), h.counts.clone())],
            );
            put(format!("hist_{}_{}.svg", safe(r.name()), safe(label)), svg)?;
        }
    }

    // training dynamics
    let mut header = vec!["run", "epoch"];
    header.extend(DYNAMICS.iter().map(|(n, _)| *n));
    let mut rows = Vec::new();
    for r in runs {
        for e in &r.epochs {
            let mut row = vec![r.name().to_string(), num(e, &["epoch"]).to_string()];
            row.extend(DYNAMICS.iter().map(|(_, p)| format!("{:?}", num(e, p))));
            rows.push(row);
        }
    }
    put("dynamics.csv".into(), csv_text(&header, &rows)?)?;
    let curve = |path: &[&str]| -> Vec<Series> {
        runs.iter()
            .map(|r| Series {
                name: r.name().to_string(),
                points: r.epochs.iter().map(|e| (num(e, &["epoch"]) + 1.0, num(e, path))).collect(),
            })
            .collect()
    };
    let mut norm_series = Vec::new();
    for split in ["id_test_norm", "ood_test_norm"] {
        for mut s in curve(&["probe", split]) {
            s.name = format!("{} {}", s.name, split.trim_end_matches("_norm").replace('_', " "));
            norm_series.push(s);
        }
    }
    put("dynamics_norms.svg".into(), line_chart("Mean representation norm", "epoch", "||f(x)||", &norm_series))?;
    put("dynamics_loss.svg".into(), line_chart("Training loss", "epoch", "mean loss", &curve(&["mean_loss"])))?;
    put(
        "dynamics_bn_gap.svg".into(),
        line_chart("Last batch-norm gap ratio (ID gap / OOD gap)", "epoch", "ratio", &curve(&["probe", "bn_gap_ratio"])),
    )?;

    // classifier gradient log-ratio per class at the final epoch, and its history
    let mut rows = Vec::new();
    let mut final_series = Vec::new();
    for r in runs {
        let mut last = None;
        for e in &r.epochs {
            let Some(Value::Array(v)) = e.get("probe").and_then(|p| p.get("grad_log_ratio")) else { continue };
            let vals: Vec<f64> = v.iter().map(|x| x.as_f64().unwrap_or(f64::INFINITY)).collect();
            for (k, g) in vals.iter().enumerate() {
                rows.push(vec![r.name().to_string(), num(e, &["epoch"]).to_string(), k.to_string(), format!("{g:?}")]);
            }
            last = Some(vals);
        }
        if let Some(v) = last {
            final_series.push(Series {
                name: r.name().to_string(),
                points: v.iter().enumerate().map(|(k, &g)| (k as f64, g)).collect(),
            });
        }
    }
    put("grad_log_ratio.csv".into(), csv_text(&["run", "epoch", "class", "log_ratio"], &rows)?)?;
    put(
        "grad_log_ratio.svg".into(),
        line_chart("log(OOD / ID) classifier gradient, final epoch", "class (by training count)", "log ratio", &final_series),
    )?;
    drop(put);
    Ok(written)
}
