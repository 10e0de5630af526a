//! Stage one: per-modality feature vectors to weighted feature graphs.
//!
//! Every scalar feature becomes a node. Nodes of one modality are fully
//! connected, cross-modality pairs are sampled with probability `inter_prob`,
//! and each kept pair carries `max(sigmoid(MI), tau)` in both directions.
//! MI and standardization statistics come from a fold's training split, and
//! the sampled topology is shared by every patient of the fold.

pub mod mi;
pub mod standardize;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{Dataset, PatientRecord};
use crate::tape::sigmoid_scalar;

pub use mi::{estimate_mi, MiTable};
pub use standardize::{standardize, Standardizer};

/// Lower clip applied to sigmoid-transformed MI weights.
pub const TAU: f64 = 0.1;

/// Edge weight used for every edge when MI weighting is ablated.
pub const UNIFORM_WEIGHT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub bins: usize,
    pub inter_prob: f64,
    pub tau: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            bins: mi::DEFAULT_BINS,
            inter_prob: 0.2,
            tau: TAU,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::contract(format!("bins must be >= 2, got {}", self.bins)));
        }
        if !(self.inter_prob > 0.0 && self.inter_prob <= 1.0) {
            return Err(Error::contract(format!("inter_prob must lie in (0, 1], got {}", self.inter_prob)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::contract(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// `max(sigmoid(mi), tau)`.
pub fn edge_weight(mi: f64, tau: f64) -> f64 {
    sigmoid_scalar(mi).max(tau)
}

/// How edge weights are assigned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting<'a> {
    MutualInformation { table: &'a MiTable, tau: f64 },
    Uniform,
}

impl Weighting<'_> {
    fn weight(&self, i: usize, j: usize) -> f64 {
        match self {
            Weighting::MutualInformation { table, tau } => edge_weight(table.get(i, j), *tau),
            Weighting::Uniform => UNIFORM_WEIGHT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64)", into = "(usize, usize, f64)")]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

impl From<(usize, usize, f64)> for Edge {
    fn from((src, dst, weight): (usize, usize, f64)) -> Self {
        Edge { src, dst, weight }
    }
}

impl From<Edge> for (usize, usize, f64) {
    fn from(e: Edge) -> Self {
        (e.src, e.dst, e.weight)
    }
}

/// Node index layout: concatenation of modalities in order, preserving
/// within-modality order. Returns `(node values, modality_of)`.
pub fn assemble_nodes(record: &PatientRecord) -> (Vec<f64>, Vec<usize>) {
    let values = record.modalities.iter().flatten().copied().collect();
    let modality_of = record
        .modalities
        .iter()
        .enumerate()
        .flat_map(|(k, m)| std::iter::repeat_n(k, m.len()))
        .collect();
    (values, modality_of)
}

fn within_modality_index(modality_of: &[usize]) -> Vec<usize> {
    let mut next = vec![0usize; modality_of.iter().max().map_or(0, |m| m + 1)];
    modality_of
        .iter()
        .map(|&k| {
            let i = next[k];
            next[k] += 1;
            i
        })
        .collect()
}

/// All intra-modality pairs plus each cross-modality pair with probability
/// `inter_prob`, visited in `(i, j)`, `i < j` order; every kept pair is
/// emitted as `i→j` then `j→i` with the same weight.
pub fn build_edges(modality_of: &[usize], weighting: Weighting<'_>, inter_prob: f64, seed: u64) -> Vec<Edge> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = modality_of.len();
    let mut edges = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let keep = if modality_of[i] == modality_of[j] {
                true
            } else {
                rng.random::<f64>() < inter_prob
            };
            if keep {
                let w = weighting.weight(i, j);
                edges.push(Edge { src: i, dst: j, weight: w });
                edges.push(Edge { src: j, dst: i, weight: w });
            }
        }
    }
    edges
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub seed: u64,
    pub bins: usize,
    pub p: f64,
    pub tau: f64,
    /// Run fingerprint, set when the graph is written as a run artifact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

/// Shared topology and weights of one fold; instantiate per patient.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTemplate {
    pub modality_of: Vec<usize>,
    pub feature_index: Vec<usize>,
    pub edges: Vec<Edge>,
    pub meta: GraphMeta,
}

impl GraphTemplate {
    pub fn build(modality_sizes: &[usize], weighting: Weighting<'_>, config: &GraphConfig, seed: u64) -> Self {
        let modality_of: Vec<usize> = modality_sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
            .collect();
        let edges = build_edges(&modality_of, weighting, config.inter_prob, seed);
        GraphTemplate {
            feature_index: within_modality_index(&modality_of),
            modality_of,
            edges,
            meta: GraphMeta {
                seed,
                bins: config.bins,
                p: config.inter_prob,
                tau: config.tau,
                fingerprint: None,
            },
        }
    }

    pub fn instantiate(&self, record: &PatientRecord) -> Result<FeatureGraph> {
        let (values, modality_of) = assemble_nodes(record);
        if modality_of != self.modality_of {
            return Err(Error::contract(format!(
                "record {} does not match the graph layout ({} nodes, expected {})",
                record.id,
                values.len(),
                self.modality_of.len()
            )));
        }
        Ok(FeatureGraph {
            node_values: values,
            modality_of,
            feature_index: self.feature_index.clone(),
            edges: self.edges.clone(),
            meta: self.meta.clone(),
        })
    }
}

/// A patient's feature graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGraph {
    #[serde(rename = "nodes")]
    pub node_values: Vec<f64>,
    pub modality_of: Vec<usize>,
    /// Position of each node inside its modality; fixes the canonical order.
    pub feature_index: Vec<usize>,
    pub edges: Vec<Edge>,
    pub meta: GraphMeta,
}

impl FeatureGraph {
    pub fn node_count(&self) -> usize {
        self.node_values.len()
    }

    /// Node order sorted by `(modality, feature_index)`: `order[k]` is the node
    /// at canonical position `k`.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.node_count()).collect();
        order.sort_by_key(|&i| (self.modality_of[i], self.feature_index[i]));
        order
    }

    /// Relabels nodes into canonical order, keeping the edge list order.
    pub fn canonicalize(&self) -> FeatureGraph {
        let order = self.canonical_order();
        let mut new_index = vec![0; order.len()];
        for (k, &i) in order.iter().enumerate() {
            new_index[i] = k;
        }
        FeatureGraph {
            node_values: order.iter().map(|&i| self.node_values[i]).collect(),
            modality_of: order.iter().map(|&i| self.modality_of[i]).collect(),
            feature_index: order.iter().map(|&i| self.feature_index[i]).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| Edge {
                    src: new_index[e.src],
                    dst: new_index[e.dst],
                    weight: e.weight,
                })
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Returns every weight replaced by [`UNIFORM_WEIGHT`].
    pub fn with_uniform_weights(mut self) -> Self {
        for e in &mut self.edges {
            e.weight = UNIFORM_WEIGHT;
        }
        self
    }

    /// Checks the structural invariants. `uniform` permits weight 1.0.
    pub fn validate(&self, uniform: bool) -> Result<()> {
        let m = self.node_count();
        let bad = |msg: String| Err(Error::Invariant(format!("feature graph: {msg}")));
        if self.modality_of.len() != m || self.feature_index.len() != m {
            return bad("node metadata length mismatch".into());
        }
        let mut weights = std::collections::HashMap::new();
        for e in &self.edges {
            if e.src >= m || e.dst >= m {
                return bad(format!("edge {}→{} out of range", e.src, e.dst));
            }
            if e.src == e.dst {
                return bad(format!("self-loop on node {}", e.src));
            }
            let in_range = if uniform {
                e.weight == UNIFORM_WEIGHT
            } else {
                e.weight >= self.meta.tau && e.weight < 1.0
            };
            if !in_range {
                return bad(format!("edge {}→{} weight {} out of range", e.src, e.dst, e.weight));
            }
            weights.insert((e.src, e.dst), e.weight);
        }
        for (&(s, d), &w) in &weights {
            if weights.get(&(d, s)) != Some(&w) {
                return bad(format!("edge {s}→{d} has no symmetric partner"));
            }
        }
        for i in 0..m {
            for j in 0..m {
                if i != j && self.modality_of[i] == self.modality_of[j] && !weights.contains_key(&(i, j)) {
                    return bad(format!("intra-modality pair {i}→{j} missing"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format {
            what: "graph",
            message: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            what: "graph",
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Builds one patient's graph from a precomputed MI table.
pub fn build_graph(record: &PatientRecord, table: &MiTable, config: &GraphConfig, seed: u64) -> Result<FeatureGraph> {
    let sizes = record.modality_sizes();
    if sizes.iter().sum::<usize>() != table.nodes {
        return Err(Error::contract(format!(
            "MI table covers {} nodes, record {} has {}",
            table.nodes,
            record.id,
            record.node_count()
        )));
    }
    let weighting = Weighting::MutualInformation { table, tau: config.tau };
    GraphTemplate::build(&sizes, weighting, config, seed).instantiate(record)
}

/// Stage-one artifacts of one fold, all fitted on its training split.
#[derive(Clone, Debug)]
pub struct FoldGraphs {
    pub standardizer: Standardizer,
    pub mi_table: MiTable,
    pub template: GraphTemplate,
}

impl FoldGraphs {
    pub fn build(dataset: &Dataset, train: &[usize], config: &GraphConfig, uniform: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let standardizer = Standardizer::fit(&dataset.records, train)?;
        let std_train: Vec<PatientRecord> = train.iter().map(|&i| standardizer.apply(&dataset.records[i])).collect();
        let m = dataset.records[train[0]].node_count();
        let mut samples = vec![Vec::with_capacity(train.len()); m];
        for r in &std_train {
            for (s, v) in samples.iter_mut().zip(r.modalities.iter().flatten()) {
                s.push(*v);
            }
        }
        let mi_table = MiTable::compute(&samples, config.bins)?;
        let weighting = if uniform {
            Weighting::Uniform
        } else {
            Weighting::MutualInformation {
                table: &mi_table,
                tau: config.tau,
            }
        };
        let template = GraphTemplate::build(&dataset.modality_sizes(), weighting, config, seed);
        Ok(FoldGraphs {
            standardizer,
            mi_table,
            template,
        })
    }

    pub fn graph(&self, record: &PatientRecord) -> Result<FeatureGraph> {
        self.template.instantiate(&self.standardizer.apply(record))
    }
}
