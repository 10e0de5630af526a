//! On-disk outputs of the pipeline commands.
//!
//! ```text
//! build-graphs:  <out>/fold_<k>/mi_table.json
//!                <out>/fold_<k>/graphs/<patient id>.json
//!                <out>/summary.json
//! cv:            <out>/report.json, <out>/report.txt,
//!                <out>/fold_<k>/model.ckpt
//! ablate:        <out>/ablation.json, <out>/ablation.txt
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::cv::{ablate, cross_validate, stratified_folds, AblationReport, MetricsReport};
use crate::error::{Error, Result};
use crate::graph::{FeatureGraph, FoldGraphs, MiTable};
use crate::record::Dataset;
use crate::report::{ablation_table, metrics_table, to_json};
use crate::train::derive_seed;

/// Upper bucket edges for weight histograms. Bucket 0 is `[τ, 0.5)` and the
/// last is `[0.95, 1.0]`.
pub const WEIGHT_BUCKETS: [f64; 11] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiTableFile {
    pub fingerprint: String,
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub table: MiTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub nodes: usize,
    /// Directed edge count.
    pub edges: usize,
    pub intra_pairs: usize,
    pub cross_pairs: usize,
    /// Directed edges per [`WEIGHT_BUCKETS`] bucket.
    pub weight_histogram: Vec<usize>,
    pub graphs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub dataset: String,
    pub fingerprint: String,
    pub seed: u64,
    pub uniform_weights: bool,
    pub folds: Vec<FoldSummary>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// File name for a patient id: characters outside `[A-Za-z0-9._-]` become `_`.
pub fn graph_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold_{fold}"))
}

pub fn weight_histogram(graph: &FeatureGraph) -> Vec<usize> {
    let last = WEIGHT_BUCKETS.len() - 1;
    let mut h = vec![0; WEIGHT_BUCKETS.len()];
    for e in &graph.edges {
        h[WEIGHT_BUCKETS.iter().position(|&b| e.weight < b).unwrap_or(last)] += 1;
    }
    h
}

/// Stage 1 for every fold: MI tables from each fold's training split and
/// one graph per patient.
pub fn build_graphs(dataset: &Dataset, cfg: &RunConfig, out: &Path) -> Result<GraphSummary> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint(&dataset.source_digest);
    let splits = stratified_folds(dataset, cfg.train.folds, cfg.seed)?;
    let names: Vec<String> = dataset.records.iter().map(|r| graph_file_name(&r.id)).collect();
    let mut seen = HashSet::new();
    for (n, r) in names.iter().zip(&dataset.records) {
        if !seen.insert(n) {
            return Err(Error::Dataset(format!("patient id {} collides with another id as a file name", r.id)));
        }
    }
    let mut folds = Vec::with_capacity(splits.len());
    for (k, split) in splits.iter().enumerate() {
        let fg = FoldGraphs::build(
            dataset,
            &split.train,
            &cfg.graph,
            cfg.ablation.no_mi,
            derive_seed(cfg.seed, k, "topology"),
        )?;
        let dir = fold_dir(out, k);
        let graph_dir = dir.join("graphs");
        create_dir(&graph_dir)?;
        let table = MiTableFile {
            fingerprint: fingerprint.clone(),
            fold: k,
            train_ids: split.train.iter().map(|&i| dataset.records[i].id.clone()).collect(),
            table: fg.mi_table.clone(),
        };
        write_text(&dir.join("mi_table.json"), &to_json(&table))?;
        let mut first = None;
        for (record, name) in dataset.records.iter().zip(&names) {
            let mut g = fg.graph(record)?;
            g.meta.fingerprint = Some(fingerprint.clone());
            g.write(&graph_dir.join(name))?;
            first.get_or_insert(g);
        }
        let g = first.ok_or_else(|| Error::contract("dataset has no records"))?;
        let cross = g.edges.iter().filter(|e| g.modality_of[e.src] != g.modality_of[e.dst]).count() / 2;
        folds.push(FoldSummary {
            fold: k,
            nodes: g.node_count(),
            edges: g.edges.len(),
            intra_pairs: g.edges.len() / 2 - cross,
            cross_pairs: cross,
            weight_histogram: weight_histogram(&g),
            graphs: dataset.len(),
        });
    }
    let summary = GraphSummary {
        dataset: dataset.name.clone(),
        fingerprint,
        seed: cfg.seed,
        uniform_weights: cfg.ablation.no_mi,
        folds,
    };
    write_text(&out.join("summary.json"), &to_json(&summary))?;
    Ok(summary)
}

/// Full two-stage cross-validation; writes reports and per-fold checkpoints.
pub fn run_cv(dataset: &Dataset, cfg: &RunConfig, out: &Path, jobs: usize) -> Result<MetricsReport> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint(&dataset.source_digest);
    let run = cross_validate(dataset, &cfg.train, &cfg.graph, cfg.ablation, cfg.seed, &fingerprint, jobs)?;
    create_dir(out)?;
    for (k, o) in run.outcomes.iter().enumerate() {
        let dir = fold_dir(out, k);
        create_dir(&dir)?;
        Checkpoint::from_model(&o.params, &fingerprint).write(&dir.join("model.ckpt"))?;
    }
    write_text(&out.join("report.json"), &to_json(&run.report))?;
    write_text(&out.join("report.txt"), &metrics_table(&run.report))?;
    Ok(run.report)
}

/// Full, no-MI and no-MGF runs with shared seeds; writes the comparison.
pub fn run_ablation(dataset: &Dataset, cfg: &RunConfig, out: &Path, jobs: usize) -> Result<AblationReport> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint(&dataset.source_digest);
    let report = ablate(dataset, &cfg.train, &cfg.graph, cfg.seed, &fingerprint, jobs)?;
    create_dir(out)?;
    write_text(&out.join("ablation.json"), &to_json(&report))?;
    write_text(&out.join("ablation.txt"), &ablation_table(&report))?;
    Ok(report)
}
