//! JSON and fixed-width text renderings of cross-validation results.

use std::fmt::Write as _;

use crate::cv::{AblationReport, MetricsReport};
use crate::error::{Error, Result};
use crate::metrics::Metrics;

pub const COLUMNS: [&str; 5] = ["ACC", "Precision", "Recall", "F1-score", "AUC"];

pub fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

pub fn metrics_from_json(text: &str) -> Result<MetricsReport> {
    serde_json::from_str(text).map_err(|e| Error::Format {
        what: "metrics report",
        message: e.to_string(),
    })
}

pub fn ablation_from_json(text: &str) -> Result<AblationReport> {
    serde_json::from_str(text).map_err(|e| Error::Format {
        what: "ablation report",
        message: e.to_string(),
    })
}

fn cells(m: &Metrics) -> [String; 5] {
    let f = |v: f64| format!("{v:.4}");
    [
        f(m.acc),
        f(m.precision),
        f(m.recall),
        f(m.f1),
        m.auc.map_or_else(|| "n/a".to_string(), f),
    ]
}

fn table(label_header: &str, rows: &[(String, &Metrics)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).chain([label_header.len()]).max().unwrap_or(0);
    let col_w: Vec<usize> = COLUMNS.iter().map(|c| c.len().max(6)).collect();
    let mut out = String::new();
    let _ = write!(out, "{label_header:<label_w$}");
    for (c, w) in COLUMNS.iter().zip(&col_w) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    let total = label_w + col_w.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for (label, m) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for (v, w) in cells(m).iter().zip(&col_w) {
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
    }
    out
}

/// One row per fold followed by the unweighted mean.
pub fn metrics_table(report: &MetricsReport) -> String {
    let mut rows: Vec<(String, &Metrics)> = report
        .folds
        .iter()
        .map(|f| (format!("fold {}", f.fold + 1), &f.metrics))
        .collect();
    rows.push(("mean".into(), &report.mean));
    let mut out = format!(
        "dataset: {}\nseed: {}\nfingerprint: {}\npositive class: {} (threshold {})\n",
        report.dataset, report.seed, report.fingerprint, report.positive_class, report.threshold
    );
    if report.ablation.no_mi || report.ablation.no_mgf {
        let _ = writeln!(out, "ablation: no_mi={} no_mgf={}", report.ablation.no_mi, report.ablation.no_mgf);
    }
    out.push('\n');
    out.push_str(&table("", &rows));
    out
}

/// Mean metrics for each variant, one row each.
pub fn ablation_table(report: &AblationReport) -> String {
    let rows: Vec<(String, &Metrics)> = report
        .rows
        .iter()
        .map(|r| (r.variant.clone(), &r.report.mean))
        .collect();
    format!(
        "dataset: {}\nseed: {}\nfingerprint: {}\n\n{}",
        report.dataset,
        report.seed,
        report.fingerprint,
        table("Method", &rows)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cv::{AblationRow, FoldRow, VARIANTS};
    use crate::train::Ablation;

    fn m(acc: f64) -> Metrics {
        Metrics {
            acc,
            precision: 0.5,
            recall: 1.0,
            f1: 2.0 / 3.0,
            auc: Some(0.75),
            precision_defined: true,
            recall_defined: true,
        }
    }

    fn report() -> MetricsReport {
        MetricsReport {
            dataset: "toy".into(),
            fingerprint: "ff".into(),
            seed: 7,
            ablation: Ablation::default(),
            positive_class: 1,
            threshold: 0.5,
            folds: (0..5)
                .map(|k| FoldRow {
                    fold: k,
                    n_train: 8,
                    n_val: 2,
                    best_epoch: 1,
                    epochs_run: 2,
                    metrics: m(0.5),
                })
                .collect(),
            mean: m(0.5),
        }
    }

    #[test]
    fn metrics_table_has_fold_rows_and_mean() {
        let t = metrics_table(&report());
        let body: Vec<&str> = t.lines().skip_while(|l| !l.starts_with('-')).skip(1).collect();
        assert_eq!(body.len(), 6);
        assert!(body[5].starts_with("mean"));
        assert!(t.contains("F1-score"));
    }

    #[test]
    fn ablation_table_shape() {
        let r = AblationReport {
            dataset: "toy".into(),
            fingerprint: "ff".into(),
            seed: 7,
            rows: VARIANTS
                .iter()
                .map(|(name, _)| AblationRow { variant: name.to_string(), report: report() })
                .collect(),
        };
        let t = ablation_table(&r);
        let lines: Vec<&str> = t.lines().skip_while(|l| !l.starts_with("Method")).collect();
        let header: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(header, ["Method", "ACC", "Precision", "Recall", "F1-score", "AUC"]);
        let labels: Vec<&str> = lines[2..].iter().map(|l| l.split("  ").next().unwrap().trim()).collect();
        assert_eq!(labels, ["full", "w/o MI", "w/o MGF"]);
    }

    #[test]
    fn json_round_trip() {
        let r = report();
        assert_eq!(metrics_from_json(&to_json(&r)).unwrap(), r);
    }
}
