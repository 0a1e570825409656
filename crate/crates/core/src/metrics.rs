//! Detection metrics with OOD as the positive class, grouped accuracy and
//! calibration error.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::ClassGroups;
use crate::error::{Result, RnaError};
use crate::scoring::ScoreSet;

/// Label written into every report so readers know which side is positive.
pub const CONVENTION: &str = "larger score => OOD; OOD is the positive class for AUC, AUPR and FPR95";

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `P(ood > id) + ½ P(ood = id)` over all ID × OOD pairs.
pub fn auroc(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let id = sorted(&scores.id_scores);
    // twice the pair credit, kept integral until the final division
    let mut credit: u128 = 0;
    for &s in &scores.ood_scores {
        let below = id.partition_point(|&v| v < s);
        let not_above = id.partition_point(|&v| v <= s);
        credit += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * id.len() as u128 * scores.ood_scores.len() as u128;
    Ok(credit as f64 / pairs as f64)
}

/// Operating points `(threshold, tp, fp)` for every distinct score, descending,
/// where samples with `score >= threshold` are flagged OOD.
fn sweep(scores: &ScoreSet) -> Vec<(f64, usize, usize)> {
    let mut all: Vec<(f64, bool)> = scores
        .ood_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.id_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((t, tp, fp));
    }
    points
}

/// Step-wise area under precision-recall, `Σ (R_k − R_{k−1}) · P_k`.
pub fn aupr(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let n_pos = scores.ood_scores.len() as f64;
    let mut area = 0.0;
    let mut prev_tp = 0;
    for (_, tp, fp) in sweep(scores) {
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            area += (tp - prev_tp) as f64 / n_pos * precision;
            prev_tp = tp;
        }
    }
    Ok(area)
}

/// Largest threshold at which at least `target` of the OOD scores are `>=` it.
/// Returns `+∞` when `target <= 0`.
pub fn tpr_threshold(scores: &ScoreSet, target: f64) -> Result<f64> {
    scores.validate()?;
    if !(target <= 1.0) || target.is_nan() {
        return Err(RnaError::InvalidArgument(format!("TPR target {target} must be at most 1")));
    }
    let mut ood = sorted(&scores.ood_scores);
    ood.reverse();
    let n = ood.len();
    let needed = (1..=n).find(|&k| k as f64 / n as f64 >= target).unwrap_or(0);
    if target <= 0.0 || needed == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(ood[needed - 1])
}

/// Fraction of ID scores at or above [`tpr_threshold`].
pub fn fpr_at_tpr(scores: &ScoreSet, target: f64) -> Result<f64> {
    let xi = tpr_threshold(scores, target)?;
    let above = scores.id_scores.iter().filter(|&&s| s >= xi).count();
    Ok(above as f64 / scores.id_scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auc: f64,
    pub aupr: f64,
    pub fpr95: f64,
}

pub fn detection_metrics(scores: &ScoreSet) -> Result<DetectionMetrics> {
    Ok(DetectionMetrics {
        auc: auroc(scores)?,
        aupr: aupr(scores)?,
        fpr95: fpr_at_tpr(scores, 0.95)?,
    })
}

/// Unweighted mean across OOD test sets.
pub fn mean_detection(items: &[DetectionMetrics]) -> Option<DetectionMetrics> {
    if items.is_empty() {
        return None;
    }
    let n = items.len() as f64;
    Some(DetectionMetrics {
        auc: items.iter().map(|m| m.auc).sum::<f64>() / n,
        aupr: items.iter().map(|m| m.aupr).sum::<f64>() / n,
        fpr95: items.iter().map(|m| m.fpr95).sum::<f64>() / n,
    })
}

/// Mean of the present entries belonging to `members`.
fn group_mean(values: &[Option<f64>], members: &[usize]) -> Option<f64> {
    let present: Vec<f64> = members.iter().filter_map(|&c| values.get(c).copied().flatten()).collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassFpr {
    pub threshold: f64,
    /// `None` for classes without test samples; those are left out of the means.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// FPR at one global threshold, broken down by the ID class of each sample.
pub fn per_class_fpr(scores: &ScoreSet, groups: &ClassGroups, target: f64) -> Result<PerClassFpr> {
    let labels = scores
        .id_labels
        .as_ref()
        .ok_or_else(|| RnaError::InvalidArgument("per-class FPR needs ID class labels".into()))?;
    let num_classes = groups.num_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(RnaError::InvalidArgument(format!("label {y} out of range")));
    }
    let xi = tpr_threshold(scores, target)?;
    let mut above = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&s, &y) in scores.id_scores.iter().zip(labels) {
        total[y] += 1;
        if s >= xi {
            above[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = above
        .iter()
        .zip(&total)
        .map(|(&a, &t)| (t > 0).then(|| a as f64 / t as f64))
        .collect();
    let all: Vec<usize> = (0..num_classes).collect();
    Ok(PerClassFpr {
        threshold: xi,
        mean: group_mean(&per_class, &all),
        many: group_mean(&per_class, &groups.many),
        medium: group_mean(&per_class, &groups.medium),
        few: group_mean(&per_class, &groups.few),
        per_class,
    })
}

pub fn per_class_fpr95(scores: &ScoreSet, groups: &ClassGroups) -> Result<PerClassFpr> {
    per_class_fpr(scores, groups, 0.95)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedAccuracy {
    pub total: f64,
    pub many: f64,
    pub medium: f64,
    pub few: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Sample-mean total accuracy and the mean per-class accuracy of each group.
pub fn grouped_accuracy(predictions: &[usize], labels: &[usize], groups: &ClassGroups) -> Result<GroupedAccuracy> {
    if predictions.len() != labels.len() {
        return Err(RnaError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(RnaError::Empty("labels"));
    }
    let num_classes = groups.num_classes();
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes {
            return Err(RnaError::InvalidArgument(format!("label {y} out of range")));
        }
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let g = |members: &[usize]| group_mean(&per_class, members).unwrap_or(f64::NAN);
    Ok(GroupedAccuracy {
        total: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
        many: g(&groups.many),
        medium: g(&groups.medium),
        few: g(&groups.few),
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Reliability bins `((m−1)/M, m/M]`; empty bins have zero accuracy and confidence.
pub fn calibration_bins(confidences: &[f64], correct: &[bool], bins: usize) -> Result<Vec<CalibrationBin>> {
    if bins == 0 {
        return Err(RnaError::InvalidArgument("ECE needs at least one bin".into()));
    }
    if confidences.len() != correct.len() {
        return Err(RnaError::Shape("confidences and correctness differ in length".into()));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(c > 0.0 && c <= 1.0) {
            return Err(RnaError::InvalidArgument(format!("confidence {c} outside (0, 1]")));
        }
        let m = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[m] += 1;
        hits[m] += ok as usize;
        conf[m] += c;
    }
    Ok((0..bins)
        .map(|m| {
            let n = count[m];
            if n == 0 {
                CalibrationBin {
                    count: 0,
                    accuracy: 0.0,
                    confidence: 0.0,
                }
            } else {
                CalibrationBin {
                    count: n,
                    accuracy: hits[m] as f64 / n as f64,
                    confidence: conf[m] / n as f64,
                }
            }
        })
        .collect())
}

pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    let table = calibration_bins(confidences, correct, bins)?;
    let n = confidences.len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(table
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCell {
    pub scorer: String,
    pub ood_set: String,
    pub metrics: DetectionMetrics,
    pub per_class_fpr95: Option<PerClassFpr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub convention: String,
    pub cells: Vec<DetectionCell>,
    /// Mean over OOD test sets, keyed by scorer.
    pub averages: BTreeMap<String, DetectionMetrics>,
    pub accuracy: GroupedAccuracy,
    pub ece: f64,
    pub ece_bins: usize,
    pub metadata: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn new(accuracy: GroupedAccuracy, ece: f64, ece_bins: usize) -> Self {
        Self {
            convention: CONVENTION.to_string(),
            cells: Vec::new(),
            averages: BTreeMap::new(),
            accuracy,
            ece,
            ece_bins,
            metadata: BTreeMap::new(),
        }
    }

    pub fn push_cell(&mut self, cell: DetectionCell) {
        self.cells.push(cell);
        self.recompute_averages();
    }

    fn recompute_averages(&mut self) {
        let mut by_scorer: BTreeMap<String, Vec<DetectionMetrics>> = BTreeMap::new();
        for c in &self.cells {
            by_scorer.entry(c.scorer.clone()).or_default().push(c.metrics);
        }
        self.averages = by_scorer
            .into_iter()
            .filter_map(|(k, v)| mean_detection(&v).map(|m| (k, m)))
            .collect();
    }

    pub fn cell(&self, scorer: &str, ood_set: &str) -> Option<&DetectionCell> {
        self.cells.iter().find(|c| c.scorer == scorer && c.ood_set == ood_set)
    }

    pub fn scorers(&self) -> Vec<String> {
        let mut v: Vec<String> = self.cells.iter().map(|c| c.scorer.clone()).collect();
        v.dedup();
        v.sort();
        v.dedup();
        v
    }

    pub fn ood_sets(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for c in &self.cells {
            if !v.contains(&c.ood_set) {
                v.push(c.ood_set.clone());
            }
        }
        v
    }

    /// One averaged row per scorer with the AUC, AUPR, FPR95, ACC, Many, Medium, Few columns.
    pub fn summary_rows(&self) -> Vec<Vec<String>> {
        let acc = &self.accuracy;
        self.averages
            .iter()
            .map(|(scorer, m)| {
                vec![
                    scorer.clone(),
                    pct(m.auc),
                    pct(m.aupr),
                    pct(m.fpr95),
                    pct(acc.total),
                    pct(acc.many),
                    pct(acc.medium),
                    pct(acc.few),
                ]
            })
            .collect()
    }

    pub const SUMMARY_HEADER: [&'static str; 8] = ["scorer", "AUC", "AUPR", "FPR95", "ACC", "Many", "Medium", "Few"];

    /// Scorer × OOD-set grid of one metric, with an average column.
    pub fn grid_rows(&self, metric: fn(&DetectionMetrics) -> f64) -> (Vec<String>, Vec<Vec<String>>) {
        let sets = self.ood_sets();
        let mut header = vec!["scorer".to_string()];
        header.extend(sets.iter().cloned());
        header.push("average".into());
        let rows = self
            .scorers()
            .into_iter()
            .map(|s| {
                let mut row = vec![s.clone()];
                for set in &sets {
                    row.push(self.cell(&s, set).map_or("-".into(), |c| pct(metric(&c.metrics))));
                }
                row.push(self.averages.get(&s).map_or("-".into(), |m| pct(metric(m))));
                row
            })
            .collect();
        (header, rows)
    }

    pub fn to_dsv(&self, sep: char) -> String {
        let header: Vec<String> = Self::SUMMARY_HEADER.iter().map(|s| s.to_string()).collect();
        dsv(&header, &self.summary_rows(), sep)
    }

    pub fn to_text_table(&self) -> String {
        let header: Vec<String> = Self::SUMMARY_HEADER.iter().map(|s| s.to_string()).collect();
        let mut out = text_table(&header, &self.summary_rows());
        let _ = writeln!(out, "ECE ({} bins): {}", self.ece_bins, pct(self.ece));
        let _ = writeln!(out, "convention: {}", self.convention);
        out
    }
}

/// Percentage with two decimals; `NaN` prints as `-`.
pub fn pct(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{:.2}", 100.0 * v)
    }
}

pub fn dsv(header: &[String], rows: &[Vec<String>], sep: char) -> String {
    let mut out = String::new();
    for line in std::iter::once(header).chain(rows.iter().map(|r| r.as_slice())) {
        out.push_str(&line.join(&sep.to_string()));
        out.push('\n');
    }
    out
}

/// Whitespace-aligned table with a rule under the header.
pub fn text_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, cell) in r.iter().enumerate().take(cols) {
            width[i] = width[i].max(cell.len());
        }
    }
    let fmt = |cells: &[String]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = width[i]) } else { format!("{c:>w$}", w = width[i]) })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = fmt(header);
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
    out.push('\n');
    for r in rows {
        out.push_str(&fmt(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::assign_class_groups;

    fn set(id: &[f64], ood: &[f64]) -> ScoreSet {
        ScoreSet::new("s", id.to_vec(), ood.to_vec()).unwrap()
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&set(&[0.0, 1.0], &[2.0, 3.0])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[1.0; 3], &[1.0; 4])).unwrap(), 0.5);
        assert_eq!(auroc(&set(&[1.0, 3.0], &[2.0, 4.0])).unwrap(), 0.75);
    }

    #[test]
    fn aupr_cases() {
        assert_eq!(aupr(&set(&[0.0, 1.0], &[2.0, 3.0])).unwrap(), 1.0);
        assert_eq!(aupr(&set(&[5.0; 4], &[5.0; 4])).unwrap(), 0.5);
    }

    #[test]
    fn aupr_small_instance_by_hand() {
        // descending: ood 5, id 4, ood 3, id 2, id 1
        // thresholds hit recall 1/2 at P=1 and recall 1 at P=2/3
        let v = aupr(&set(&[4.0, 2.0, 1.0], &[5.0, 3.0])).unwrap();
        assert!((v - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn fpr_cases() {
        assert_eq!(fpr_at_tpr(&set(&[0.0, 1.0], &[2.0, 3.0]), 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&set(&[10.0, 11.0], &[2.0, 3.0]), 0.95).unwrap(), 1.0);
        let mut ood: Vec<f64> = (0..19).map(|i| 2.5 + i as f64).collect();
        ood.push(2.4);
        let s = set(&[1.0, 2.0, 3.0, 4.0], &ood);
        assert_eq!(tpr_threshold(&s, 0.95).unwrap(), 2.5);
        assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), 0.5);
        assert!(fpr_at_tpr(&s, 1.5).is_err());
        assert_eq!(fpr_at_tpr(&s, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn empty_partitions_error() {
        let s = ScoreSet {
            score_name: "s".into(),
            id_scores: vec![],
            id_labels: None,
            ood_scores: vec![1.0],
        };
        assert!(auroc(&s).is_err());
        assert!(aupr(&s).is_err());
        assert!(fpr_at_tpr(&s, 0.95).is_err());
    }

    #[test]
    fn per_class_cases() {
        let groups = assign_class_groups(&[30, 20, 10]).unwrap();
        // class 2 strictly below the threshold, others far above
        let s = set(&[9.0, 9.0, 9.5, 9.5, 0.0, 0.0], &[1.0, 2.0, 3.0, 4.0])
            .with_labels(vec![0, 0, 1, 1, 2, 2])
            .unwrap();
        let r = per_class_fpr95(&s, &groups).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), Some(0.0)]);
        assert_eq!(r.few, Some(0.0));
        assert_eq!(r.many, Some(1.0));
        // identical per-class distributions give the global value
        let s = set(&[1.0, 5.0, 1.0, 5.0, 1.0, 5.0], &[2.0, 3.0, 4.0])
            .with_labels(vec![0, 0, 1, 1, 2, 2])
            .unwrap();
        let global = fpr_at_tpr(&s, 0.95).unwrap();
        let r = per_class_fpr95(&s, &groups).unwrap();
        assert!(r.per_class.iter().all(|&v| v == Some(global)));
        // class without samples is flagged and excluded
        let s = set(&[1.0, 5.0], &[2.0]).with_labels(vec![0, 1]).unwrap();
        let r = per_class_fpr95(&s, &groups).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.few, None);
        assert_eq!(r.mean, Some(0.5));
    }

    #[test]
    fn grouped_accuracy_cases() {
        let groups = assign_class_groups(&[60, 50, 40, 30, 20, 10]).unwrap();
        let labels: Vec<usize> = (0..6).flat_map(|c| [c; 4]).collect();
        let a = grouped_accuracy(&labels, &labels, &groups).unwrap();
        assert_eq!((a.total, a.many, a.medium, a.few), (1.0, 1.0, 1.0, 1.0));
        let preds: Vec<usize> = labels.iter().map(|&y| if groups.few.contains(&y) { (y + 1) % 6 } else { y }).collect();
        let a = grouped_accuracy(&preds, &labels, &groups).unwrap();
        assert_eq!(a.few, 0.0);
        assert!((a.total - (1.0 - groups.few.len() as f64 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn ece_cases() {
        assert_eq!(ece(&[0.75; 4], &[true, true, true, false], 15).unwrap(), 0.0);
        let one_bin = ece(&[0.8, 0.8], &[true, false], 1).unwrap();
        assert!((one_bin - 0.3).abs() < 1e-12);
        let two = ece(&[0.4, 0.4, 0.9, 0.9], &[true, false, true, true], 2).unwrap();
        assert!((two - 0.1).abs() < 1e-12);
        assert!(ece(&[0.0], &[true], 15).is_err());
        assert!(ece(&[0.5], &[true], 0).is_err());
    }

    #[test]
    fn report_tables() {
        let groups = assign_class_groups(&[3, 2, 1]).unwrap();
        let acc = grouped_accuracy(&[0, 1, 2], &[0, 1, 1], &groups).unwrap();
        let mut r = MetricsReport::new(acc, 0.05, 15);
        for (set_name, auc) in [("a", 0.9), ("b", 0.7)] {
            r.push_cell(DetectionCell {
                scorer: "RN".into(),
                ood_set: set_name.into(),
                metrics: DetectionMetrics { auc, aupr: 0.5, fpr95: 0.2 },
                per_class_fpr95: None,
            });
        }
        assert!((r.averages["RN"].auc - 0.8).abs() < 1e-12);
        let dsv = r.to_dsv(',');
        assert!(dsv.starts_with("scorer,AUC,AUPR,FPR95,ACC,Many,Medium,Few\nRN,80.00"));
        let (h, rows) = r.grid_rows(|m| m.auc);
        assert_eq!(h, vec!["scorer", "a", "b", "average"]);
        assert_eq!(rows[0], vec!["RN", "90.00", "70.00", "80.00"]);
        assert!(r.to_text_table().contains("convention"));
    }
}
