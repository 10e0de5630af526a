//! The graph classifier: two attention layers with LeakyReLU, global
//! fusion, mean pooling over nodes and a linear two-logit head.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{init_uniform, layer_tape, AttentionLayerParams, AttentionVars, EdgeIndex};
use crate::error::{Error, Result};
use crate::graph::FeatureGraph;
use crate::mgf::{mgf_sequence_tape, MgfParams, MgfVars};
use crate::tape::{log_softmax, Tape, Var};
use crate::tensor::Tensor;

pub const CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub heads: usize,
    pub d_head: usize,
    pub state_size: usize,
    pub leaky_slope: f64,
    /// When false the fusion block is replaced by the identity.
    pub use_mgf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            heads: 4,
            d_head: 8,
            state_size: crate::mgf::DEFAULT_STATE_SIZE,
            leaky_slope: 0.01,
            use_mgf: true,
        }
    }
}

impl ModelConfig {
    /// Node widths `[1, after layer 1, after layer 2]`.
    pub fn widths(&self) -> [usize; 3] {
        let w = self.heads * self.d_head;
        [1, w + 1, 2 * w + 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layer1: AttentionLayerParams,
    pub layer2: AttentionLayerParams,
    pub mgf: MgfParams,
    /// `D×2`.
    pub head_w: Tensor,
    /// `[2]`.
    pub head_b: Tensor,
}

impl ModelParams {
    pub fn init(rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let [d0, d1, d2] = cfg.widths();
        ModelParams {
            layer1: AttentionLayerParams::init(rng, d0, cfg.heads, cfg.d_head),
            layer2: AttentionLayerParams::init(rng, d1, cfg.heads, cfg.d_head),
            mgf: MgfParams::init(rng, d2, cfg.state_size),
            head_w: init_uniform(rng, d2, CLASSES),
            head_b: Tensor::zeros(&[CLASSES]),
        }
    }

    /// Every tensor with its qualified name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, layer) in [("layer1", &self.layer1), ("layer2", &self.layer2)] {
            out.extend(layer.tensors().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.extend(self.mgf.tensors().into_iter().map(|(n, t)| (format!("mgf.{n}"), t)));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.layer1.tensors_mut().into_iter().map(|(_, t)| t));
        out.extend(self.layer2.tensors_mut().into_iter().map(|(_, t)| t));
        out.extend(self.mgf.tensors_mut().into_iter().map(|(_, t)| t));
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds parameters from tensors in [`ModelParams::named_tensors`] order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut model = ModelParams::init(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0), cfg);
        let slots = model.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Format {
                what: "model tensors",
                message: format!("expected {} tensors, got {}", slots.len(), tensors.len()),
            });
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "model tensors",
                    lhs: t.shape().to_vec(),
                    rhs: slot.shape().to_vec(),
                });
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let layer1 = self.layer1.bind(tape, trainable);
        let layer2 = self.layer2.bind(tape, trainable);
        let mgf = self.mgf.bind(tape, trainable);
        let head_w = tape.leaf(self.head_w.clone(), trainable);
        let head_b = tape.leaf(self.head_b.clone(), trainable);
        ModelVars {
            layer1,
            layer2,
            mgf,
            head_w,
            head_b,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub layer1: AttentionVars,
    pub layer2: AttentionVars,
    pub mgf: MgfVars,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Handles in [`ModelParams::named_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let l = |a: &AttentionVars| [a.w_q, a.w_k, a.w_v];
        let m = &self.mgf;
        let mut v = Vec::new();
        v.extend(l(&self.layer1));
        v.extend(l(&self.layer2));
        v.extend([m.w_in, m.w_delta, m.b_delta, m.a_log, m.w_b, m.w_c, m.d_skip, m.w_out]);
        v.extend([self.head_w, self.head_b]);
        v
    }

    /// Inverse of [`ModelVars::all`].
    pub fn from_vars(cfg: &ModelConfig, v: &[Var]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::contract(format!("expected 16 parameter handles, got {}", v.len())));
        }
        let layer = |i: usize| AttentionVars {
            w_q: v[i],
            w_k: v[i + 1],
            w_v: v[i + 2],
            heads: cfg.heads,
            d_head: cfg.d_head,
        };
        Ok(ModelVars {
            layer1: layer(0),
            layer2: layer(3),
            mgf: MgfVars {
                w_in: v[6],
                w_delta: v[7],
                b_delta: v[8],
                a_log: v[9],
                w_b: v[10],
                w_c: v[11],
                d_skip: v[12],
                w_out: v[13],
            },
            head_w: v[14],
            head_b: v[15],
        })
    }
}

/// Several graphs stacked for one forward pass. Each graph is relabeled
/// into canonical node order, so its rows form one contiguous sequence.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    /// `T×1` node values.
    pub values: Tensor,
    pub edges: EdgeIndex,
    /// `(first row, node count)` per graph.
    pub segments: Rc<[(usize, usize)]>,
}

impl GraphBatch {
    pub fn new(graphs: &[&FeatureGraph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::contract("empty graph batch"));
        }
        let canon: Vec<FeatureGraph> = graphs.iter().map(|g| g.canonicalize()).collect();
        let mut values = Vec::new();
        let mut segments = Vec::with_capacity(canon.len());
        for g in &canon {
            if g.node_count() == 0 {
                return Err(Error::contract("graph without nodes"));
            }
            segments.push((values.len(), g.node_count()));
            values.extend_from_slice(&g.node_values);
        }
        let parts: Vec<(usize, &[crate::graph::Edge])> = canon.iter().map(|g| (g.node_count(), g.edges.as_slice())).collect();
        let edges = EdgeIndex::stacked(&parts)?;
        Ok(GraphBatch {
            values: Tensor::from_parts(vec![values.len(), 1], values),
            edges,
            segments: segments.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Node embeddings after the two attention layers (each followed by LeakyReLU).
pub fn encode_tape(tape: &mut Tape, vars: &ModelVars, batch: &GraphBatch, cfg: &ModelConfig) -> Result<Var> {
    let h0 = tape.constant(batch.values.clone());
    let ew = tape.constant(batch.edges.weights.clone());
    let h1 = layer_tape(tape, &vars.layer1, h0, &batch.edges, ew)?;
    let h1 = tape.leaky_relu(h1, cfg.leaky_slope);
    let h2 = layer_tape(tape, &vars.layer2, h1, &batch.edges, ew)?;
    Ok(tape.leaky_relu(h2, cfg.leaky_slope))
}

/// Pooled embeddings through the linear head: `B×2` logits.
pub fn head_tape(tape: &mut Tape, vars: &ModelVars, nodes: Var, segments: Rc<[(usize, usize)]>) -> Result<Var> {
    let pooled = tape.segment_mean(nodes, segments)?;
    let logits = tape.matmul(pooled, vars.head_w)?;
    tape.add_row(logits, vars.head_b)
}

/// Records the full forward pass; returns `B×2` logits.
pub fn forward_tape(tape: &mut Tape, vars: &ModelVars, batch: &GraphBatch, cfg: &ModelConfig) -> Result<Var> {
    let h = encode_tape(tape, vars, batch, cfg)?;
    let h = if cfg.use_mgf {
        mgf_sequence_tape(tape, &vars.mgf, h, batch.segments.clone())?
    } else {
        h
    };
    head_tape(tape, vars, h, batch.segments.clone())
}

/// Logits for a batch of graphs, `B×2`.
pub fn forward_batch(model: &ModelParams, cfg: &ModelConfig, graphs: &[&FeatureGraph]) -> Result<Tensor> {
    let batch = GraphBatch::new(graphs)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let logits = forward_tape(&mut tape, &vars, &batch, cfg)?;
    Ok(tape.value(logits).clone())
}

pub fn forward(model: &ModelParams, cfg: &ModelConfig, graph: &FeatureGraph) -> Result<[f64; CLASSES]> {
    let t = forward_batch(model, cfg, &[graph])?;
    Ok([t.data()[0], t.data()[1]])
}

/// `-log softmax(logits)[label]`.
pub fn loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::contract(format!("label {label} out of range for {} logits", logits.len())));
    }
    Ok(-log_softmax(logits)[label])
}

/// Probability of class 1.
pub fn positive_probability(logits: &[f64]) -> f64 {
    log_softmax(logits)[1].exp()
}
