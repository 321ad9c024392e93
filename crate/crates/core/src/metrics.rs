//! Classification metrics: confusion matrix, accuracy, macro-averaged
//! precision/recall/F1, and one-vs-rest ROC / precision-recall curves with
//! trapezoidal AUC.

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

/// Rows are true classes, columns are predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    cells: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, cells: vec![0; k * k] }
    }

    pub fn from_pairs(k: usize, truths: &[usize], preds: &[usize]) -> Result<Self> {
        if truths.len() != preds.len() {
            return invalid(format!(
                "{} labels vs {} predictions",
                truths.len(),
                preds.len()
            ));
        }
        let mut cm = ConfusionMatrix::new(k);
        for (&t, &p) in truths.iter().zip(preds) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return invalid(format!("class pair ({truth}, {pred}) outside [0, {})", self.k));
        }
        self.cells[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, truth: usize, pred: usize) -> usize {
        self.cells[truth * self.k + pred]
    }

    pub fn total(&self) -> usize {
        self.cells.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.k).map(|i| self.cells[i * self.k + i]).sum()
    }

    /// trace / total; exact ratio of counts.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    fn row_sum(&self, r: usize) -> usize {
        self.cells[r * self.k..(r + 1) * self.k].iter().sum()
    }

    fn col_sum(&self, c: usize) -> usize {
        (0..self.k).map(|r| self.cells[r * self.k + c]).sum()
    }

    /// Per-class precision/recall/F1. A class nobody predicted gets
    /// precision 0; a class with no true members gets recall 0.
    pub fn per_class(&self) -> Vec<ClassMetrics> {
        (0..self.k)
            .map(|c| {
                let tp = self.count(c, c) as f64;
                let pred = self.col_sum(c) as f64;
                let truth = self.row_sum(c) as f64;
                let precision = if pred > 0.0 { tp / pred } else { 0.0 };
                let recall = if truth > 0.0 { tp / truth } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics { precision, recall, f1, support: truth as usize }
            })
            .collect()
    }

    pub fn macro_precision(&self) -> f64 {
        mean(self.per_class().iter().map(|m| m.precision))
    }

    pub fn macro_recall(&self) -> f64 {
        mean(self.per_class().iter().map(|m| m.recall))
    }

    pub fn macro_f1(&self) -> f64 {
        mean(self.per_class().iter().map(|m| m.f1))
    }

    /// Rows scaled to sum to 1; empty rows stay all-zero.
    pub fn row_normalized(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k * self.k];
        for r in 0..self.k {
            let sum = self.row_sum(r);
            if sum > 0 {
                for c in 0..self.k {
                    out[r * self.k + c] = self.count(r, c) as f64 / sum as f64;
                }
            }
        }
        out
    }

    /// CSV with a header column of true-class names.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut s = String::from("true\\pred");
        for c in 0..self.k {
            s.push(',');
            s.push_str(class_names.get(c).unwrap_or(&"?"));
        }
        s.push('\n');
        for r in 0..self.k {
            s.push_str(class_names.get(r).unwrap_or(&"?"));
            for c in 0..self.k {
                s.push_str(&format!(",{}", self.count(r, c)));
            }
            s.push('\n');
        }
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// One-vs-rest ROC curve: (false positive rate, true positive rate) points
/// from sweeping the score threshold, plus trapezoidal AUC. Tied scores move
/// together (one point per distinct score).
pub fn roc_curve(scores: &[f64], positives: &[bool]) -> Result<(Vec<(f64, f64)>, f64)> {
    let (order, pos_total, neg_total) = sweep_order(scores, positives)?;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg_total, tp as f64 / pos_total));
    }
    let auc = trapezoid(&points);
    Ok((points, auc))
}

/// One-vs-rest precision-recall curve: (recall, precision) points from the
/// same threshold sweep, AUC by trapezoid. Starts at the first threshold's
/// precision with recall 0 by convention.
pub fn pr_curve(scores: &[f64], positives: &[bool]) -> Result<(Vec<(f64, f64)>, f64)> {
    let (order, pos_total, _) = sweep_order(scores, positives)?;
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut predicted) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positives[order[i]] {
                tp += 1;
            }
            predicted += 1;
            i += 1;
        }
        points.push((tp as f64 / pos_total, tp as f64 / predicted as f64));
    }
    let first_precision = points.first().map(|&(_, p)| p).unwrap_or(1.0);
    let mut curve = vec![(0.0, first_precision)];
    curve.extend(points);
    let auc = trapezoid(&curve);
    Ok((curve, auc))
}

fn sweep_order(scores: &[f64], positives: &[bool]) -> Result<(Vec<usize>, f64, f64)> {
    if scores.len() != positives.len() || scores.is_empty() {
        return invalid("scores and labels must be non-empty and equal length");
    }
    let pos = positives.iter().filter(|&&p| p).count();
    let neg = positives.len() - pos;
    if pos == 0 || neg == 0 {
        return invalid("curve needs at least one positive and one negative");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    Ok((order, pos as f64, neg as f64))
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}
