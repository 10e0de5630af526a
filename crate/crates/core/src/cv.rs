//! Stratified k-fold cross-validation and the ablation runner.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::metrics::{mean_metrics, Metrics};
use crate::record::Dataset;
use crate::train::{derive_seed, train_fold, Ablation, FoldOutcome, FoldSplit, TrainConfig};

/// Assigns every record to one validation fold, class by class. Records
/// are keyed on id so input order does not matter.
pub fn stratified_folds(dataset: &Dataset, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(Error::contract(format!("need at least 2 folds, got {folds}")));
    }
    if dataset.len() < folds {
        return Err(Error::contract(format!("{} records cannot fill {folds} folds", dataset.len())));
    }
    let mut by_id: Vec<usize> = (0..dataset.len()).collect();
    by_id.sort_by(|&a, &b| dataset.records[a].id.cmp(&dataset.records[b].id));
    let mut val = vec![Vec::new(); folds];
    let mut next = 0;
    for class in 0..=1u8 {
        let mut members: Vec<usize> = by_id.iter().copied().filter(|&i| dataset.records[i].label == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < folds {
            return Err(Error::contract(format!(
                "class {class} has {} samples, fewer than {folds} folds",
                members.len()
            )));
        }
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, class as usize, "folds")));
        for i in members {
            val[next].push(i);
            next = (next + 1) % folds;
        }
    }
    Ok(val
        .into_iter()
        .map(|mut v| {
            v.sort_unstable();
            let train = (0..dataset.len()).filter(|i| v.binary_search(i).is_err()).collect();
            FoldSplit { train, val: v }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub fingerprint: String,
    pub seed: u64,
    pub ablation: Ablation,
    /// Which class the precision, recall and F1 columns refer to.
    pub positive_class: u8,
    pub threshold: f64,
    pub folds: Vec<FoldRow>,
    pub mean: Metrics,
}

pub struct CvRun {
    pub report: MetricsReport,
    pub splits: Vec<FoldSplit>,
    pub outcomes: Vec<FoldOutcome>,
}

/// Runs every fold, up to `jobs` at a time; results do not depend on `jobs`.
pub fn cross_validate(
    dataset: &Dataset,
    train_cfg: &TrainConfig,
    graph_cfg: &GraphConfig,
    ablation: Ablation,
    seed: u64,
    fingerprint: &str,
    jobs: usize,
) -> Result<CvRun> {
    train_cfg.validate()?;
    graph_cfg.validate()?;
    let splits = stratified_folds(dataset, train_cfg.folds, seed)?;
    let run = |k: usize| train_fold(dataset, &splits[k], train_cfg, graph_cfg, ablation, seed, k);
    let jobs = jobs.clamp(1, splits.len());
    let mut results: Vec<Option<Result<FoldOutcome>>> = (0..splits.len()).map(|_| None).collect();
    if jobs == 1 {
        for (k, slot) in results.iter_mut().enumerate() {
            *slot = Some(run(k));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| loop {
                    let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if k >= splits.len() {
                        break;
                    }
                    let r = run(k);
                    done.lock().expect("fold worker panicked")[k] = Some(r);
                });
            }
        });
    }
    let outcomes: Vec<FoldOutcome> = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<_>>()?;
    let folds: Vec<FoldRow> = outcomes
        .iter()
        .zip(&splits)
        .enumerate()
        .map(|(k, (o, s))| FoldRow {
            fold: k,
            n_train: s.train.len(),
            n_val: s.val.len(),
            best_epoch: o.best_epoch,
            epochs_run: o.epochs_run,
            metrics: o.metrics.clone(),
        })
        .collect();
    let mean = mean_metrics(&folds.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>());
    Ok(CvRun {
        report: MetricsReport {
            dataset: dataset.name.clone(),
            fingerprint: fingerprint.to_string(),
            seed,
            ablation,
            positive_class: 1,
            threshold: crate::metrics::THRESHOLD,
            folds,
            mean,
        },
        splits,
        outcomes,
    })
}

/// The three ablation variants in table order.
pub const VARIANTS: [(&str, Ablation); 3] = [
    ("full", Ablation { no_mi: false, no_mgf: false }),
    ("w/o MI", Ablation { no_mi: true, no_mgf: false }),
    ("w/o MGF", Ablation { no_mi: false, no_mgf: true }),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub fingerprint: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

/// Runs full, no-MI and no-MGF cross-validation with identical seeds.
pub fn ablate(
    dataset: &Dataset,
    train_cfg: &TrainConfig,
    graph_cfg: &GraphConfig,
    seed: u64,
    fingerprint: &str,
    jobs: usize,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (name, ab) in VARIANTS {
        let run = cross_validate(dataset, train_cfg, graph_cfg, ab, seed, fingerprint, jobs)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            report: run.report,
        });
    }
    Ok(AblationReport {
        dataset: dataset.name.clone(),
        fingerprint: fingerprint.to_string(),
        seed,
        rows,
    })
}
