//! Detection metrics.
//!
//! Scores are probabilities, so a LOW score is MORE anomalous. A threshold
//! `t` flags every sample with `score <= t`; sweeping `t` upwards through the
//! distinct scores traces the ROC and precision-recall curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Threshold the rates below were measured at.
    pub threshold: f64,
    /// `None` when there are no attack samples.
    pub tpr: Option<f64>,
    /// `None` when there are no benign samples.
    pub fpr: Option<f64>,
    /// `None` unless both classes are present.
    pub auc: Option<f64>,
    /// `None` when there are no attack samples.
    pub average_precision: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    Ok(())
}

/// Cumulative (true positive, false positive) counts after each distinct
/// threshold, in ascending threshold order.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).map_or(true, |&j| scores[j] != scores[i]);
        if last_of_group {
            out.push((scores[i], tp, fp));
        }
    }
    out
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// Area under the ROC curve by the trapezoidal rule. Tied scores form a
/// single threshold step, so ties earn half credit.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both attack and benign samples".into(),
        ));
    }
    let (mut area, mut prev_tpr, mut prev_fpr) = (0.0, 0.0, 0.0);
    for (_, tp, fp) in sweep(scores, labels) {
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// Average precision: precision at each threshold weighted by the recall
/// gained there.
pub fn compute_avprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs attack samples".into(),
        ));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (_, tp, fp) in sweep(scores, labels) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Full evaluation at `threshold` (flag `score < threshold`, matching the
/// detector's alert rule) plus the threshold-free metrics and curve.
pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Result<EvalResult> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    let mut tp = 0;
    let mut fp = 0;
    for (&s, &l) in scores.iter().zip(labels) {
        if s < threshold {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let curve = sweep(scores, labels)
        .into_iter()
        .map(|(t, tp, fp)| CurvePoint {
            threshold: t,
            tpr: rate(tp, pos).unwrap_or(0.0),
            fpr: rate(fp, neg).unwrap_or(0.0),
            precision: tp as f64 / (tp + fp) as f64,
        })
        .collect();
    Ok(EvalResult {
        threshold,
        tpr: rate(tp, pos),
        fpr: rate(fp, neg),
        auc: compute_auc(scores, labels).ok(),
        average_precision: compute_avprc(scores, labels).ok(),
        curve,
    })
}
