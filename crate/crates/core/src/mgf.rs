//! Global fusion: flatten graph nodes into a sequence, run a selective
//! state-space block over it, and add the result back to the nodes.
//!
//! The block is a minimal selective SSM with a real diagonal state matrix:
//!
//! ```text
//! [x, z] = u · W_in
//! Δ_t    = softplus(x_t · W_Δ + b_Δ)              (one step size per position)
//! B_t    = x_t · W_B,  C_t = x_t · W_C
//! h_t    = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x_t     (per channel, h_0 = 0)
//! y_t    = C_t · h_t + D ⊙ x_t
//! out    = (y ⊙ silu(z)) · W_out
//! ```
//!
//! with `A = -exp(a_log)` so every decay factor lies in (0, 1). There is no
//! causal convolution in front of the scan.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::init_uniform;
use crate::error::{Error, Result};
use crate::tape::{softplus_scalar, ScanVars, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STATE_SIZE: usize = 16;

/// `softplus(b) = 0.05` at initialization.
pub fn initial_delta_bias() -> f64 {
    (0.05f64.exp() - 1.0).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgfParams {
    /// `D×2D`: content columns first, gate columns second.
    pub w_in: Tensor,
    /// `D×1`.
    pub w_delta: Tensor,
    /// `[1]`.
    pub b_delta: Tensor,
    /// `D×N`, log magnitude of the negative state matrix.
    pub a_log: Tensor,
    /// `D×N`.
    pub w_b: Tensor,
    /// `D×N`.
    pub w_c: Tensor,
    /// `[D]`.
    pub d_skip: Tensor,
    /// `D×D`.
    pub w_out: Tensor,
}

impl MgfParams {
    pub fn init(rng: &mut impl Rng, width: usize, state_size: usize) -> Self {
        let mut a_log = Tensor::zeros(&[width, state_size]);
        for (i, v) in a_log.data_mut().iter_mut().enumerate() {
            *v = ((i % state_size + 1) as f64).ln();
        }
        MgfParams {
            w_in: init_uniform(rng, width, 2 * width),
            w_delta: init_uniform(rng, width, 1),
            b_delta: Tensor::vector(vec![initial_delta_bias()]),
            a_log,
            w_b: init_uniform(rng, width, state_size),
            w_c: init_uniform(rng, width, state_size),
            d_skip: Tensor::filled(&[width], 1.0),
            w_out: init_uniform(rng, width, width),
        }
    }

    pub fn width(&self) -> usize {
        self.w_out.rows()
    }

    pub fn state_size(&self) -> usize {
        self.a_log.cols()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("w_in", &self.w_in),
            ("w_delta", &self.w_delta),
            ("b_delta", &self.b_delta),
            ("a_log", &self.a_log),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("d_skip", &self.d_skip),
            ("w_out", &self.w_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("w_in", &mut self.w_in),
            ("w_delta", &mut self.w_delta),
            ("b_delta", &mut self.b_delta),
            ("a_log", &mut self.a_log),
            ("w_b", &mut self.w_b),
            ("w_c", &mut self.w_c),
            ("d_skip", &mut self.d_skip),
            ("w_out", &mut self.w_out),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.width(), self.state_size());
        let expect: [(&str, &Tensor, Vec<usize>); 8] = [
            ("w_in", &self.w_in, vec![d, 2 * d]),
            ("w_delta", &self.w_delta, vec![d, 1]),
            ("b_delta", &self.b_delta, vec![1]),
            ("a_log", &self.a_log, vec![d, n]),
            ("w_b", &self.w_b, vec![d, n]),
            ("w_c", &self.w_c, vec![d, n]),
            ("d_skip", &self.d_skip, vec![d]),
            ("w_out", &self.w_out, vec![d, d]),
        ];
        for (_, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "mgf params",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MgfVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        MgfVars {
            w_in: leaf(&self.w_in),
            w_delta: leaf(&self.w_delta),
            b_delta: leaf(&self.b_delta),
            a_log: leaf(&self.a_log),
            w_b: leaf(&self.w_b),
            w_c: leaf(&self.w_c),
            d_skip: leaf(&self.d_skip),
            w_out: leaf(&self.w_out),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MgfVars {
    pub w_in: Var,
    pub w_delta: Var,
    pub b_delta: Var,
    pub a_log: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub d_skip: Var,
    pub w_out: Var,
}

/// Node embeddings laid out in canonical sequence order.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSequence {
    /// `M×D`, row `k` is the node at canonical position `k`.
    pub states: Tensor,
    /// `order[k]` is the graph node index at position `k`.
    pub order: Vec<usize>,
}

/// Canonical node order: modality ascending, then position inside the modality.
pub fn canonical_order(modality_of: &[usize], feature_index: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..modality_of.len()).collect();
    order.sort_by_key(|&i| (modality_of[i], feature_index[i]));
    order
}

fn invert(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(t.len());
    for &i in order {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_parts(t.shape().to_vec(), data)
}

impl NodeSequence {
    pub fn flatten(states: &Tensor, modality_of: &[usize], feature_index: &[usize]) -> Result<Self> {
        if states.shape().len() != 2 || states.rows() != modality_of.len() || feature_index.len() != modality_of.len() {
            return Err(Error::Shape {
                op: "flatten",
                lhs: states.shape().to_vec(),
                rhs: vec![modality_of.len()],
            });
        }
        let order = canonical_order(modality_of, feature_index);
        Ok(NodeSequence {
            states: permute_rows(states, &order),
            order,
        })
    }

    /// Inverse of [`NodeSequence::flatten`] applied to `seq` (same layout as `states`).
    pub fn reshape_like(&self, seq: &Tensor) -> Tensor {
        permute_rows(seq, &invert(&self.order))
    }

    pub fn reshape(&self) -> Tensor {
        self.reshape_like(&self.states)
    }
}

/// Projected scan operands for one sequence, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanInputs {
    /// `T×D`.
    pub x: Tensor,
    /// `T`.
    pub delta: Vec<f64>,
    /// `T×N`.
    pub b: Tensor,
    /// `T×N`.
    pub c: Tensor,
}

/// Straight-line sequential recurrence for one sequence; the reference the
/// tape's segmented scan must reproduce bitwise.
pub fn naive_scan(inputs: &ScanInputs, a_log: &Tensor, d_skip: &[f64]) -> Tensor {
    let (t_len, d) = (inputs.x.rows(), inputs.x.cols());
    let n = a_log.cols();
    let mut h = vec![vec![0.0; n]; d];
    let mut y = vec![0.0; t_len * d];
    for t in 0..t_len {
        let dt = inputs.delta[t];
        for ch in 0..d {
            let u = inputs.x.at(t, ch);
            let mut acc = 0.0;
            for s in 0..n {
                let a = -a_log.at(ch, s).exp();
                let carried = if t == 0 { 0.0 } else { (dt * a).exp() * h[ch][s] };
                h[ch][s] = carried + (dt * inputs.b.at(t, s)) * u;
                acc += inputs.c.at(t, s) * h[ch][s];
            }
            y[t * d + ch] = acc + d_skip[ch] * u;
        }
    }
    Tensor::from_parts(vec![t_len, d], y)
}

/// Scan operand projections `(x, z, Δ, B, C)` on the tape.
fn project(tape: &mut Tape, p: &MgfVars, seq: Var) -> Result<(Var, Var, Var, Var, Var)> {
    let d = tape.value(p.w_out).rows();
    let xz = tape.matmul(seq, p.w_in)?;
    let x = tape.slice_cols(xz, 0, d)?;
    let z = tape.slice_cols(xz, d, 2 * d)?;
    let pre = tape.matmul(x, p.w_delta)?;
    let pre = tape.add_row(pre, p.b_delta)?;
    let delta = tape.softplus(pre);
    let b = tape.matmul(x, p.w_b)?;
    let c = tape.matmul(x, p.w_c)?;
    Ok((x, z, delta, b, c))
}

/// Gated selective-scan branch (before the residual) over each segment of
/// `seq`, which must already be in sequence order.
pub fn scan_branch_tape(tape: &mut Tape, p: &MgfVars, seq: Var, segments: Rc<[(usize, usize)]>) -> Result<Var> {
    let d = tape.value(p.w_out).rows();
    let s = tape.value(seq);
    if s.shape().len() != 2 || s.cols() != d {
        return Err(Error::Shape {
            op: "mgf",
            lhs: s.shape().to_vec(),
            rhs: vec![s.rows(), d],
        });
    }
    let (x, z, delta, b, c) = project(tape, p, seq)?;
    let y = tape.selective_scan(
        ScanVars {
            x,
            delta,
            b,
            c,
            a_log: p.a_log,
            d_skip: p.d_skip,
        },
        segments,
    )?;
    let gate = tape.silu(z);
    let gated = tape.mul(y, gate)?;
    tape.matmul(gated, p.w_out)
}

/// `seq + branch(seq)` for sequences already in canonical order.
pub fn mgf_sequence_tape(tape: &mut Tape, p: &MgfVars, seq: Var, segments: Rc<[(usize, usize)]>) -> Result<Var> {
    let branch = scan_branch_tape(tape, p, seq, segments)?;
    tape.add(seq, branch)
}

/// Full fusion step for one graph with an arbitrary node order: flatten
/// to canonical order, scan, reshape back, add residually.
pub fn mgf_tape(tape: &mut Tape, p: &MgfVars, states: Var, order: &[usize]) -> Result<Var> {
    let m = order.len();
    let seq = tape.gather_rows(states, order.to_vec().into())?;
    let branch = scan_branch_tape(tape, p, seq, vec![(0, m)].into())?;
    let back = tape.gather_rows(branch, invert(order).into())?;
    tape.add(states, back)
}

/// `states + reshape(scan(flatten(states)))`.
pub fn mgf_forward(params: &MgfParams, states: &Tensor, modality_of: &[usize], feature_index: &[usize]) -> Result<Tensor> {
    params.validate()?;
    if states.shape().len() != 2 || states.cols() != params.width() {
        return Err(Error::Shape {
            op: "mgf_forward",
            lhs: states.shape().to_vec(),
            rhs: vec![states.rows(), params.width()],
        });
    }
    let order = NodeSequence::flatten(states, modality_of, feature_index)?.order;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let h = tape.constant(states.clone());
    let out = mgf_tape(&mut tape, &vars, h, &order)?;
    Ok(tape.value(out).clone())
}

/// Gated scan output (no residual) for a sequence already in canonical order.
pub fn selective_scan(params: &MgfParams, seq: &Tensor) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let s = tape.constant(seq.clone());
    let m = seq.rows();
    let out = scan_branch_tape(&mut tape, &vars, s, vec![(0, m)].into())?;
    Ok(tape.value(out).clone())
}

/// The plain-value scan operands the block would feed to the recurrence.
pub fn scan_inputs(params: &MgfParams, seq: &Tensor) -> Result<ScanInputs> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let s = tape.constant(seq.clone());
    let (x, _, delta, b, c) = project(&mut tape, &vars, s)?;
    Ok(ScanInputs {
        x: tape.value(x).clone(),
        delta: tape.value(delta).data().to_vec(),
        b: tape.value(b).clone(),
        c: tape.value(c).clone(),
    })
}

/// Every decay factor `exp(Δ·A)` for a given step size.
pub fn decay_factors(params: &MgfParams, delta: f64) -> Vec<f64> {
    params.a_log.data().iter().map(|&l| (delta * -l.exp()).exp()).collect()
}

/// Step size produced by a pre-activation value.
pub fn step_size(pre: f64) -> f64 {
    softplus_scalar(pre)
}
