//! Scoring a trained model and turning persisted scores into a report.
//!
//! [`score_model`] is the only step that touches the network; everything in
//! [`MetricsReport`] is recomputed from the resulting [`ScoreTable`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ClassGroups, DatasetBundle, ImageSet};
use crate::error::{Result, RnaError};
use crate::losses::softmax;
use crate::metrics::{detection_metrics, ece, grouped_accuracy, per_class_fpr95, DetectionCell, MetricsReport};
use crate::model::{argmax_rows, ModelBundle};
use crate::scalar::Scalar;
use crate::scoring::{ScoreSet, Scorer};

fn default_scorers() -> Vec<Scorer> {
    Scorer::all().to_vec()
}
fn default_temperature() -> f64 {
    1.0
}
fn default_bins() -> usize {
    15
}
fn default_chunk() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_scorers")]
    pub scorers: Vec<Scorer>,
    #[serde(default = "default_temperature")]
    pub energy_temperature: f64,
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scorers: default_scorers(),
            energy_temperature: default_temperature(),
            ece_bins: default_bins(),
            chunk: default_chunk(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.scorers.is_empty() {
            return Err("at least one scorer is required".into());
        }
        if !(self.energy_temperature > 0.0) {
            return Err("energy_temperature must be positive".into());
        }
        if self.ece_bins == 0 {
            return Err("ece_bins must be at least 1".into());
        }
        Ok(())
    }
}

/// Domain tag of the ID test split in score records.
pub const ID_DOMAIN: &str = "id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample: usize,
    /// [`ID_DOMAIN`] or the OOD test-set name.
    pub domain: String,
    pub label: Option<usize>,
    pub scorer: Scorer,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample: usize,
    pub label: usize,
    pub prediction: usize,
    pub confidence: f64,
}

/// Everything the report needs, in flat tabular form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScoreTable {
    pub scores: Vec<ScoreRecord>,
    pub predictions: Vec<PredictionRecord>,
}

impl ScoreTable {
    pub fn ood_sets(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .scores
            .iter()
            .filter(|r| r.domain != ID_DOMAIN)
            .map(|r| r.domain.clone())
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn scorers(&self) -> Vec<Scorer> {
        let mut v: Vec<Scorer> = self.scores.iter().map(|r| r.scorer).collect();
        v.sort();
        v.dedup();
        v
    }

    /// ID scores (with labels) against one OOD set for one scorer.
    pub fn score_set(&self, scorer: Scorer, ood_set: &str) -> Result<ScoreSet> {
        let mut id = Vec::new();
        let mut labels = Vec::new();
        let mut ood = Vec::new();
        for r in self.scores.iter().filter(|r| r.scorer == scorer) {
            if r.domain == ID_DOMAIN {
                id.push(r.score);
                labels.push(r.label.unwrap_or(usize::MAX));
            } else if r.domain == ood_set {
                ood.push(r.score);
            }
        }
        let set = ScoreSet::new(scorer.name(), id, ood)?;
        if labels.contains(&usize::MAX) {
            Ok(set)
        } else {
            set.with_labels(labels)
        }
    }
}

fn score_split<T: Scalar>(
    model: &ModelBundle<T>,
    set: &ImageSet<T>,
    labels: Option<&[usize]>,
    domain: &str,
    config: &EvalConfig,
    table: &mut ScoreTable,
) -> Result<()> {
    if set.is_empty() {
        return Ok(());
    }
    let out = model.forward_eval_chunked(set.pixels(), set.len(), config.chunk)?;
    let (d, c) = (out.features.cols, out.logits.cols);
    for &scorer in &config.scorers {
        let s = scorer.score_rows(&out.features.data, d, &out.logits.data, c, config.energy_temperature);
        table.scores.extend(s.into_iter().enumerate().map(|(i, score)| ScoreRecord {
            sample: i,
            domain: domain.to_string(),
            label: labels.map(|l| l[i]),
            scorer,
            score,
        }));
    }
    if let Some(labels) = labels {
        let preds = argmax_rows(&out.logits);
        for (i, row) in out.logits.iter_rows().take(out.logits.rows).enumerate() {
            let z: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let conf = softmax(&z).into_iter().fold(0.0, f64::max);
            table.predictions.push(PredictionRecord {
                sample: i,
                label: labels[i],
                prediction: preds[i],
                confidence: conf,
            });
        }
    }
    Ok(())
}

/// Scores the ID test split and every OOD test set with every configured scorer.
pub fn score_model<T: Scalar>(model: &ModelBundle<T>, data: &DatasetBundle<T>, config: &EvalConfig) -> Result<ScoreTable> {
    config.validate().map_err(RnaError::InvalidArgument)?;
    let mut table = ScoreTable::default();
    score_split(model, &data.id_test.images, Some(data.id_test.labels()), ID_DOMAIN, config, &mut table)?;
    for (name, set) in &data.ood_tests {
        if name == ID_DOMAIN {
            return Err(RnaError::InvalidArgument(format!("OOD test set may not be named {ID_DOMAIN:?}")));
        }
        score_split(model, set, None, name, config, &mut table)?;
    }
    Ok(table)
}

/// Builds the scorer × OOD-set report from persisted scores alone.
pub fn report_from_scores(table: &ScoreTable, groups: &ClassGroups, ece_bins: usize) -> Result<MetricsReport> {
    let labels: Vec<usize> = table.predictions.iter().map(|p| p.label).collect();
    let preds: Vec<usize> = table.predictions.iter().map(|p| p.prediction).collect();
    let accuracy = grouped_accuracy(&preds, &labels, groups)?;
    let conf: Vec<f64> = table.predictions.iter().map(|p| p.confidence).collect();
    let correct: Vec<bool> = table.predictions.iter().map(|p| p.label == p.prediction).collect();
    let mut report = MetricsReport::new(accuracy, ece(&conf, &correct, ece_bins)?, ece_bins);
    for scorer in table.scorers() {
        for set in table.ood_sets() {
            let scores = table.score_set(scorer, &set)?;
            report.push_cell(DetectionCell {
                scorer: scorer.name().to_string(),
                ood_set: set.clone(),
                metrics: detection_metrics(&scores)?,
                per_class_fpr95: scores.id_labels.is_some().then(|| per_class_fpr95(&scores, groups)).transpose()?,
            });
        }
    }
    Ok(report)
}

/// [`score_model`] followed by [`report_from_scores`].
pub fn evaluate<T: Scalar>(
    model: &ModelBundle<T>,
    data: &DatasetBundle<T>,
    groups: &ClassGroups,
    config: &EvalConfig,
) -> Result<(ScoreTable, MetricsReport)> {
    let table = score_model(model, data, config)?;
    let report = report_from_scores(&table, groups, config.ece_bins)?;
    Ok((table, report))
}

/// Mean AUC over OOD test sets per scorer name.
pub fn mean_auc(report: &MetricsReport) -> BTreeMap<String, f64> {
    report.averages.iter().map(|(k, v)| (k.clone(), v.auc)).collect()
}
