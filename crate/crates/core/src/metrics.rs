//! Ranking and thresholded metrics on empirical step functions.
//!
//! Scores that tie form one block and are admitted or rejected together; a
//! room is predicted positive when its score is at or above the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts after admitting each tie block, highest scores first.
struct Curve {
    n_pos: usize,
    n_neg: usize,
    /// `(threshold, tp, fp)` per distinct score, descending.
    points: Vec<(f64, usize, usize)>,
}

fn curve(scores: &[f64], labels: &[u8]) -> Result<Curve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "degenerate label set: {n_pos} positives, {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((threshold, tp, fp));
    }
    Ok(Curve {
        n_pos,
        n_neg,
        points,
    })
}

/// Average precision: `sum_i (R_i - R_{i-1}) P_i` over tie blocks.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let c = curve(scores, labels)?;
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for &(_, tp, fp) in &c.points {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / c.n_pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(ap)
}

/// Largest recall over thresholds whose false-positive rate is at most
/// `fpr_cap`. The threshold above every score counts (recall 0, FPR 0).
pub fn recall_at_fpr(scores: &[f64], labels: &[u8], fpr_cap: f64) -> Result<f64> {
    let c = curve(scores, labels)?;
    let mut best = 0.0;
    for &(_, tp, fp) in &c.points {
        if fp as f64 / c.n_neg as f64 <= fpr_cap {
            best = f64::max(best, tp as f64 / c.n_pos as f64);
        }
    }
    Ok(best)
}

/// Smallest false-positive rate over thresholds whose recall is at least
/// `recall_floor`. Admitting everything (FPR 1) always qualifies.
pub fn fpr_at_recall(scores: &[f64], labels: &[u8], recall_floor: f64) -> Result<f64> {
    let c = curve(scores, labels)?;
    let mut best = 1.0;
    for &(_, tp, fp) in &c.points {
        if tp as f64 / c.n_pos as f64 >= recall_floor {
            best = f64::min(best, fp as f64 / c.n_neg as f64);
        }
    }
    Ok(best)
}

fn f1(tp: usize, fp: usize, n_pos: usize) -> f64 {
    let denom = 2 * tp + fp + (n_pos - tp);
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Maximum F1 over distinct score thresholds, with the highest maximizing
/// threshold.
pub fn best_f1(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    let c = curve(scores, labels)?;
    let mut best = (-1.0, f64::INFINITY);
    for &(threshold, tp, fp) in &c.points {
        let f = f1(tp, fp, c.n_pos);
        if f > best.0 {
            best = (f, threshold);
        }
    }
    Ok(best)
}

/// F1 when predicting positive for `score >= threshold`.
pub fn f1_at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    let c = curve(scores, labels)?;
    let (tp, fp) = c
        .points
        .iter()
        .take_while(|p| p.0 >= threshold)
        .last()
        .map_or((0, 0), |p| (p.1, p.2));
    Ok(f1(tp, fp, c.n_pos))
}

/// Expected fraction of planted capsules among the `top_k` highest
/// attribution scores, breaking ties uniformly at random.
///
/// `top_k` defaults to the number of planted capsules. Returns `None` when
/// nothing is planted.
pub fn attribution_hit_rate(
    attribution: &[f64],
    planted: &[usize],
    top_k: Option<usize>,
) -> Option<f64> {
    if planted.is_empty() {
        return None;
    }
    let n = attribution.len();
    let k = top_k.unwrap_or(planted.len()).min(n);
    if k == n {
        return Some(1.0);
    }
    let mut sorted = attribution.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let cutoff = sorted[k - 1];
    let above = attribution.iter().filter(|&&a| a > cutoff).count();
    let at = attribution.iter().filter(|&&a| a == cutoff).count();
    // `k - above` of the `at` tied capsules make the cut.
    let share = (k - above) as f64 / at as f64;
    let hits: f64 = planted
        .iter()
        .map(|&i| {
            let a = attribution[i];
            if a > cutoff {
                1.0
            } else if a == cutoff {
                share
            } else {
                0.0
            }
        })
        .sum();
    Some(hits / planted.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pr_auc: f64,
    pub f1: f64,
    pub f1_threshold: f64,
    pub recall_at_fpr01: f64,
    pub fpr_at_recall09: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub attribution_hit_rate: Option<f64>,
}

impl MetricReport {
    /// Metrics of `scores`. With `threshold` the F1 is taken at that fixed
    /// threshold (e.g. one selected on validation data); otherwise the best
    /// threshold on these scores is used.
    pub fn compute(scores: &[f64], labels: &[u8], threshold: Option<f64>) -> Result<Self> {
        let (f1, f1_threshold) = match threshold {
            Some(t) => (f1_at_threshold(scores, labels, t)?, t),
            None => best_f1(scores, labels)?,
        };
        let n_pos = labels.iter().filter(|&&y| y == 1).count();
        Ok(Self {
            pr_auc: pr_auc(scores, labels)?,
            f1,
            f1_threshold,
            recall_at_fpr01: recall_at_fpr(scores, labels, 0.1)?,
            fpr_at_recall09: fpr_at_recall(scores, labels, 0.9)?,
            n_pos,
            n_neg: labels.len() - n_pos,
            attribution_hit_rate: None,
        })
    }
}
