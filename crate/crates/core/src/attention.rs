//! Edge-aware multi-head attention message passing.
//!
//! For every edge `j → i` and head `h`:
//!
//! ```text
//! alpha_ij = softmax_{j ∈ N(i)} ( Q_i · (K_j + E_ij) / sqrt(d_head) )
//! h'_i     = ( Σ_j alpha_ij (V_j + E_ij) )_heads ‖ h_i
//! ```
//!
//! where the scalar edge weight `E_ij` is added to every coordinate of the
//! key and value, `N(i)` are the in-neighbors of `i`, and nodes without
//! in-neighbors receive a zero message.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Edge;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayerParams {
    pub heads: usize,
    pub d_head: usize,
    /// `d_in × (heads·d_head)`; head `h` owns columns `h·d_head..(h+1)·d_head`.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub(crate) fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

impl AttentionLayerParams {
    pub fn init(rng: &mut impl Rng, d_in: usize, heads: usize, d_head: usize) -> Self {
        let w = heads * d_head;
        AttentionLayerParams {
            heads,
            d_head,
            w_q: init_uniform(rng, d_in, w),
            w_k: init_uniform(rng, d_in, w),
            w_v: init_uniform(rng, d_in, w),
        }
    }

    pub fn zeros(d_in: usize, heads: usize, d_head: usize) -> Self {
        let shape = [d_in, heads * d_head];
        AttentionLayerParams {
            heads,
            d_head,
            w_q: Tensor::zeros(&shape),
            w_k: Tensor::zeros(&shape),
            w_v: Tensor::zeros(&shape),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_q.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.heads * self.d_head + self.d_in()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = [self.d_in(), self.heads * self.d_head];
        if self.heads == 0 || self.d_head == 0 {
            return Err(Error::contract("attention layer needs heads >= 1 and d_head >= 1"));
        }
        for w in [&self.w_q, &self.w_k, &self.w_v] {
            if w.shape() != shape {
                return Err(Error::Shape {
                    op: "attention params",
                    lhs: w.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 3] {
        [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 3] {
        [("w_q", &mut self.w_q), ("w_k", &mut self.w_k), ("w_v", &mut self.w_v)]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        AttentionVars {
            w_q: tape.leaf(self.w_q.clone(), trainable),
            w_k: tape.leaf(self.w_k.clone(), trainable),
            w_v: tape.leaf(self.w_v.clone(), trainable),
            heads: self.heads,
            d_head: self.d_head,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub heads: usize,
    pub d_head: usize,
}

/// Directed edge list laid out for the tape, possibly spanning several
/// graphs stacked row-wise.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub nodes: usize,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    /// `E×1` scalar edge weights.
    pub weights: Tensor,
}

impl EdgeIndex {
    pub fn new(nodes: usize, edges: &[Edge]) -> Result<Self> {
        Self::stacked(&[(nodes, edges)])
    }

    /// Stacks graphs so graph `g`'s node `i` becomes row `offset_g + i`.
    pub fn stacked(graphs: &[(usize, &[Edge])]) -> Result<Self> {
        let total_edges: usize = graphs.iter().map(|(_, e)| e.len()).sum();
        let mut src = Vec::with_capacity(total_edges);
        let mut dst = Vec::with_capacity(total_edges);
        let mut w = Vec::with_capacity(total_edges);
        let mut offset = 0;
        for &(nodes, edges) in graphs {
            for e in edges {
                if e.src >= nodes || e.dst >= nodes {
                    return Err(Error::contract(format!(
                        "edge {}→{} references a node outside 0..{nodes}",
                        e.src, e.dst
                    )));
                }
                src.push(offset + e.src);
                dst.push(offset + e.dst);
                w.push(e.weight);
            }
            offset += nodes;
        }
        Ok(EdgeIndex {
            nodes: offset,
            src: src.into(),
            dst: dst.into(),
            weights: Tensor::from_parts(vec![total_edges, 1], w),
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Records attention weights `E×heads` for `states` (`nodes×d_in`).
pub fn attention_weights_tape(
    tape: &mut Tape,
    layer: &AttentionVars,
    states: Var,
    edges: &EdgeIndex,
    edge_weights: Var,
) -> Result<(Var, Var)> {
    let h = tape.value(states);
    let d_in = tape.value(layer.w_q).rows();
    if h.shape() != [edges.nodes, d_in] {
        return Err(Error::Shape {
            op: "attention",
            lhs: h.shape().to_vec(),
            rhs: vec![edges.nodes, d_in],
        });
    }
    let q = tape.matmul(states, layer.w_q)?;
    let k = tape.matmul(states, layer.w_k)?;
    let q_dst = tape.gather_rows(q, edges.dst.clone())?;
    let k_src = tape.gather_rows(k, edges.src.clone())?;
    let k_src = tape.add_col(k_src, edge_weights)?;
    let scale = 1.0 / (layer.d_head as f64).sqrt();
    let scores = tape.head_dot(q_dst, k_src, layer.heads, scale)?;
    let alpha = tape.group_softmax(scores, edges.dst.clone(), edges.nodes)?;
    Ok((alpha, scores))
}

/// Records `(Σ_j alpha_ij (V_j + E_ij)) ‖ h_i` for every node.
pub fn aggregate_tape(
    tape: &mut Tape,
    layer: &AttentionVars,
    states: Var,
    edges: &EdgeIndex,
    edge_weights: Var,
    alpha: Var,
) -> Result<Var> {
    let v = tape.matmul(states, layer.w_v)?;
    let v_src = tape.gather_rows(v, edges.src.clone())?;
    let v_src = tape.add_col(v_src, edge_weights)?;
    let msg = tape.head_mul(alpha, v_src)?;
    let agg = tape.scatter_add_rows(msg, edges.dst.clone(), edges.nodes)?;
    tape.concat(agg, states, 1)
}

/// One full attention layer on the tape.
pub fn layer_tape(tape: &mut Tape, layer: &AttentionVars, states: Var, edges: &EdgeIndex, edge_weights: Var) -> Result<Var> {
    let (alpha, _) = attention_weights_tape(tape, layer, states, edges, edge_weights)?;
    aggregate_tape(tape, layer, states, edges, edge_weights, alpha)
}

fn check_states(layer: &AttentionLayerParams, states: &Tensor) -> Result<()> {
    layer.validate()?;
    if states.shape().len() != 2 || states.cols() != layer.d_in() {
        return Err(Error::Shape {
            op: "attention",
            lhs: states.shape().to_vec(),
            rhs: vec![states.rows(), layer.d_in()],
        });
    }
    Ok(())
}

/// Per-edge, per-head attention weights (`E×heads`, edge order preserved).
pub fn attention_weights(layer: &AttentionLayerParams, states: &Tensor, edges: &[Edge]) -> Result<Tensor> {
    check_states(layer, states)?;
    let index = EdgeIndex::new(states.rows(), edges)?;
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape, false);
    let h = tape.constant(states.clone());
    let ew = tape.constant(index.weights.clone());
    let (alpha, _) = attention_weights_tape(&mut tape, &vars, h, &index, ew)?;
    Ok(tape.value(alpha).clone())
}

/// Updated node states `M×(heads·d_head + d_in)` given precomputed weights.
pub fn aggregate(layer: &AttentionLayerParams, states: &Tensor, edges: &[Edge], alpha: &Tensor) -> Result<Tensor> {
    check_states(layer, states)?;
    if alpha.shape() != [edges.len(), layer.heads] {
        return Err(Error::Shape {
            op: "aggregate",
            lhs: alpha.shape().to_vec(),
            rhs: vec![edges.len(), layer.heads],
        });
    }
    let index = EdgeIndex::new(states.rows(), edges)?;
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape, false);
    let h = tape.constant(states.clone());
    let ew = tape.constant(index.weights.clone());
    let a = tape.constant(alpha.clone());
    let out = aggregate_tape(&mut tape, &vars, h, &index, ew, a)?;
    Ok(tape.value(out).clone())
}

/// [`attention_weights`] followed by [`aggregate`].
pub fn attention_layer(layer: &AttentionLayerParams, states: &Tensor, edges: &[Edge]) -> Result<Tensor> {
    let alpha = attention_weights(layer, states, edges)?;
    aggregate(layer, states, edges, &alpha)
}
