//! Classification metrics: confusion matrix, per-class precision / recall /
//! F1 and the support-weighted F1.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub support: Vec<usize>,
    /// `confusion[gold][predicted]`
    pub confusion_matrix: Vec<Vec<usize>>,
    pub count: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics of `predicted` against `gold`; 0/0 ratios are taken as 0.
pub fn compute_metrics(predicted: &[usize], gold: &[usize], num_classes: usize) -> Metrics {
    assert_eq!(predicted.len(), gold.len(), "prediction/gold length mismatch");
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &g) in predicted.iter().zip(gold) {
        confusion[g][p] += 1;
    }
    let count = gold.len();
    let mut f1 = Vec::with_capacity(num_classes);
    let mut precision = Vec::with_capacity(num_classes);
    let mut recall = Vec::with_capacity(num_classes);
    let mut support = Vec::with_capacity(num_classes);
    let mut correct = 0;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        correct += tp;
        let predicted_c: usize = (0..num_classes).map(|g| confusion[g][c]).sum();
        let gold_c: usize = confusion[c].iter().sum();
        let p = ratio(tp, predicted_c);
        let r = ratio(tp, gold_c);
        precision.push(p);
        recall.push(r);
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        support.push(gold_c);
    }
    let weighted = if count == 0 {
        0.0
    } else {
        f1.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / count as f64
    };
    Metrics {
        weighted_f1: weighted,
        accuracy: ratio(correct, count),
        per_class_f1: f1,
        per_class_precision: precision,
        per_class_recall: recall,
        support,
        confusion_matrix: confusion,
        count,
    }
}
