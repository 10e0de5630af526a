//! Binary classification metrics with class 1 as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores at or above this probability are predicted positive.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    /// False when precision had a zero denominator and was reported as 0.
    pub precision_defined: bool,
    pub recall_defined: bool,
}

/// Mann-Whitney AUC with tied scores counted as one half.
pub fn auc(scores: &[(f64, u8)]) -> Option<f64> {
    let n_pos = scores.iter().filter(|s| s.1 == 1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    // midranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if scores[k].1 == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// ACC, precision, recall, F1 at [`THRESHOLD`] and rank AUC over
/// `(P(class 1), label)` pairs.
pub fn compute_metrics(scores: &[(f64, u8)]) -> Result<Metrics> {
    if scores.is_empty() {
        return Err(Error::contract("metrics need at least one sample"));
    }
    if let Some((_, l)) = scores.iter().find(|s| s.1 > 1) {
        return Err(Error::contract(format!("label {l} is not binary")));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for &(p, y) in scores {
        match (p >= THRESHOLD, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { (0.0, false) } else { (num as f64 / den as f64, true) };
    let (precision, precision_defined) = ratio(tp, tp + fp);
    let (recall, recall_defined) = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        acc: (tp + tn) as f64 / scores.len() as f64,
        precision,
        recall,
        f1,
        auc: auc(scores),
        precision_defined,
        recall_defined,
    })
}

/// Unweighted mean over folds; AUC averages only folds where it is defined.
pub fn mean_metrics(rows: &[Metrics]) -> Metrics {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&Metrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let aucs: Vec<f64> = rows.iter().filter_map(|m| m.auc).collect();
    Metrics {
        acc: mean(|m| m.acc),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        precision_defined: rows.iter().all(|m| m.precision_defined),
        recall_defined: rows.iter().all(|m| m.recall_defined),
    }
}
