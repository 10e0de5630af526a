//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node in
//! creation order, which is already a topological order. [`Tape::backward`]
//! walks the nodes once in reverse and accumulates gradients into the
//! `requires_grad` leaves. Leaf gradients accumulate across repeated
//! `backward` calls until [`Tape::zero_grad`] clears them.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    Exp(Var),
    LeakyRelu(Var, f64),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_block: usize,
        b_block: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    Sum(Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    HeadDot {
        q: Var,
        k: Var,
        heads: usize,
        scale: f64,
    },
    GroupSoftmax {
        x: Var,
        groups: Rc<[usize]>,
        n_groups: usize,
    },
    HeadMul {
        alpha: Var,
        v: Var,
    },
    SegmentMean {
        x: Var,
        segments: Rc<[(usize, usize)]>,
    },
    SelectiveScan {
        inputs: ScanVars,
        segments: Rc<[(usize, usize)]>,
        states: Vec<f64>,
        /// `exp(Δ_t·A)` per step; zero at segment starts.
        decays: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Rc<[usize]>,
    },
}

/// Tape handles of the selective-scan operands.
#[derive(Clone, Copy, Debug)]
pub struct ScanVars {
    /// `T×D` content sequence.
    pub x: Var,
    /// `T×1` positive step sizes.
    pub delta: Var,
    /// `T×N` input-dependent input matrix rows.
    pub b: Var,
    /// `T×N` input-dependent readout rows.
    pub c: Var,
    /// `D×N` log magnitude of the (negative) state matrix.
    pub a_log: Var,
    /// `D` skip coefficients.
    pub d_skip: Var,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn matrix_dims(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Only leaves created with `requires_grad`
    /// receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(ta).ok_or_else(|| shape_err("matmul", ta.shape(), tb.shape()))?;
        let (k2, n) = matrix_dims(tb).ok_or_else(|| shape_err("matmul", ta.shape(), tb.shape()))?;
        if k != k2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        Ok(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = matrix_dims(ta).ok_or_else(|| shape_err("add_row", ta.shape(), tr.shape()))?;
        if tr.len() != n {
            return Err(shape_err("add_row", ta.shape(), tr.shape()));
        }
        let r = tr.data();
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(a, row), rg))
    }

    /// Adds the scalar `col[i]` to every entry of row `i`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (m, n) = matrix_dims(ta).ok_or_else(|| shape_err("add_col", ta.shape(), tc.shape()))?;
        if tc.len() != m {
            return Err(shape_err("add_col", ta.shape(), tc.shape()));
        }
        let c = tc.data();
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for o in &mut out[i * n..(i + 1) * n] {
                *o += c[i];
            }
        }
        let rg = self.rg(&[a, col]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddCol(a, col), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `x` for `x > 0`, `slope·x` otherwise. The derivative at exactly 0 is `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("softmax", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x, outer, len, inner },
            rg,
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(shape_err("concat", sa, sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let a_block = sa[axis] * inner;
        let b_block = sb[axis] * inner;
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for o in 0..outer {
            out.extend_from_slice(&ta.data()[o * a_block..(o + 1) * a_block]);
            out.extend_from_slice(&tb.data()[o * b_block..(o + 1) * b_block]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { a, b, outer, a_block, b_block },
            rg,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t).ok_or_else(|| shape_err("slice_cols", t.shape(), &[start, end]))?;
        if start > end || end > n {
            return Err(shape_err("slice_cols", t.shape(), &[start, end]));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&t.data()[i * n + start..i * n + end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, w], out), Op::SliceCols { x, start, end }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Row `i` of the output is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t).ok_or_else(|| shape_err("gather_rows", t.shape(), &[index.len()]))?;
        let mut out = Vec::with_capacity(index.len() * n);
        for &r in index.iter() {
            if r >= m {
                return Err(Error::contract(format!("gather_rows: row {r} out of range for {m} rows")));
            }
            out.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[x]);
        let shape = vec![index.len(), n];
        Ok(self.push(Tensor::from_parts(shape, out), Op::GatherRows(x, index), rg))
    }

    /// Sums row `i` of `x` into output row `index[i]`, in the order of `index`.
    pub fn scatter_add_rows(&mut self, x: Var, index: Rc<[usize]>, out_rows: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t).ok_or_else(|| shape_err("scatter_add_rows", t.shape(), &[index.len()]))?;
        if m != index.len() {
            return Err(shape_err("scatter_add_rows", t.shape(), &[index.len()]));
        }
        let mut out = vec![0.0; out_rows * n];
        for (i, &r) in index.iter().enumerate() {
            if r >= out_rows {
                return Err(Error::contract(format!(
                    "scatter_add_rows: row {r} out of range for {out_rows} rows"
                )));
            }
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(&t.data()[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![out_rows, n], out),
            Op::ScatterAddRows(x, index),
            rg,
        ))
    }

    /// Per-row, per-head dot products: `q, k` are `E×(heads·d)`, output is `E×heads`
    /// with entry `(e, h) = scale · Σ_c q[e, h·d + c] · k[e, h·d + c]`.
    pub fn head_dot(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        let dims = matrix_dims(tq);
        if tq.shape() != tk.shape() || dims.is_none() || heads == 0 || !dims.unwrap().1.is_multiple_of(heads) {
            return Err(shape_err("head_dot", tq.shape(), tk.shape()));
        }
        let (e, w) = dims.unwrap();
        let d = w / heads;
        let mut out = vec![0.0; e * heads];
        for r in 0..e {
            for h in 0..heads {
                let base = r * w + h * d;
                let mut s = 0.0;
                for c in 0..d {
                    s += tq.data()[base + c] * tk.data()[base + c];
                }
                out[r * heads + h] = s * scale;
            }
        }
        let rg = self.rg(&[q, k]);
        Ok(self.push(
            Tensor::from_parts(vec![e, heads], out),
            Op::HeadDot { q, k, heads, scale },
            rg,
        ))
    }

    /// Softmax of each column over the rows that share a group id.
    pub fn group_softmax(&mut self, x: Var, groups: Rc<[usize]>, n_groups: usize) -> Result<Var> {
        let t = self.value(x);
        let (e, h) = matrix_dims(t).ok_or_else(|| shape_err("group_softmax", t.shape(), &[groups.len()]))?;
        if e != groups.len() {
            return Err(shape_err("group_softmax", t.shape(), &[groups.len()]));
        }
        if let Some(&g) = groups.iter().find(|&&g| g >= n_groups) {
            return Err(Error::contract(format!("group_softmax: group {g} >= {n_groups}")));
        }
        let src = t.data();
        let mut max = vec![f64::NEG_INFINITY; n_groups * h];
        for (r, &g) in groups.iter().enumerate() {
            for c in 0..h {
                let m = &mut max[g * h + c];
                *m = m.max(src[r * h + c]);
            }
        }
        let mut out = vec![0.0; e * h];
        let mut sum = vec![0.0; n_groups * h];
        for (r, &g) in groups.iter().enumerate() {
            for c in 0..h {
                let v = (src[r * h + c] - max[g * h + c]).exp();
                out[r * h + c] = v;
                sum[g * h + c] += v;
            }
        }
        for (r, &g) in groups.iter().enumerate() {
            for c in 0..h {
                out[r * h + c] /= sum[g * h + c];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![e, h], out),
            Op::GroupSoftmax { x, groups, n_groups },
            rg,
        ))
    }

    /// Scales head block `h` of row `e` of `v` (`E×(heads·d)`) by `alpha[e, h]`.
    pub fn head_mul(&mut self, alpha: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.value(alpha), self.value(v));
        let (e, heads) = matrix_dims(ta).ok_or_else(|| shape_err("head_mul", ta.shape(), tv.shape()))?;
        let (e2, w) = matrix_dims(tv).ok_or_else(|| shape_err("head_mul", ta.shape(), tv.shape()))?;
        if e != e2 || heads == 0 || w % heads != 0 {
            return Err(shape_err("head_mul", ta.shape(), tv.shape()));
        }
        let d = w / heads;
        let mut out = tv.data().to_vec();
        for r in 0..e {
            for h in 0..heads {
                let a = ta.data()[r * heads + h];
                for o in &mut out[r * w + h * d..r * w + (h + 1) * d] {
                    *o *= a;
                }
            }
        }
        let rg = self.rg(&[alpha, v]);
        Ok(self.push(Tensor::from_parts(vec![e, w], out), Op::HeadMul { alpha, v }, rg))
    }

    /// Mean over each `(start, len)` block of rows; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: Rc<[(usize, usize)]>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t).ok_or_else(|| shape_err("segment_mean", t.shape(), &[segments.len()]))?;
        let mut out = vec![0.0; segments.len() * n];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > m {
                return Err(Error::contract(format!("segment_mean: bad segment ({start}, {len}) for {m} rows")));
            }
            let row = &mut out[s * n..(s + 1) * n];
            for r in start..start + len {
                for (o, &v) in row.iter_mut().zip(&t.data()[r * n..(r + 1) * n]) {
                    *o += v;
                }
            }
            let inv = 1.0 / len as f64;
            for o in row.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![segments.len(), n], out),
            Op::SegmentMean { x, segments },
            rg,
        ))
    }

    /// Diagonal selective state-space recurrence, run independently on each
    /// `(start, len)` row segment:
    ///
    /// ```text
    /// h_t[d,n] = exp(Δ_t · A[d,n]) · h_{t-1}[d,n] + (Δ_t · B_t[n]) · x_t[d]
    /// y_t[d]   = Σ_n C_t[n] · h_t[d,n] + D[d] · x_t[d]
    /// ```
    ///
    /// with `A = -exp(a_log)` and `h` zero at the start of every segment.
    pub fn selective_scan(&mut self, vars: ScanVars, segments: Rc<[(usize, usize)]>) -> Result<Var> {
        let x = self.value(vars.x);
        let (t_len, d) = matrix_dims(x).ok_or_else(|| shape_err("selective_scan", x.shape(), &[]))?;
        let a_log = self.value(vars.a_log);
        let (d2, n) = matrix_dims(a_log).ok_or_else(|| shape_err("selective_scan", x.shape(), a_log.shape()))?;
        let delta = self.value(vars.delta);
        let bm = self.value(vars.b);
        let cm = self.value(vars.c);
        let d_skip = self.value(vars.d_skip);
        if d2 != d
            || delta.len() != t_len
            || bm.shape() != [t_len, n]
            || cm.shape() != [t_len, n]
            || d_skip.len() != d
        {
            return Err(shape_err("selective_scan", x.shape(), a_log.shape()));
        }
        let a: Vec<f64> = a_log.data().iter().map(|&v| -v.exp()).collect();
        let mut states = vec![0.0; t_len * d * n];
        let mut decays = vec![0.0; t_len * d * n];
        let mut out = vec![0.0; t_len * d];
        for &(start, len) in segments.iter() {
            if start + len > t_len {
                return Err(Error::contract(format!(
                    "selective_scan: segment ({start}, {len}) exceeds {t_len} rows"
                )));
            }
            for t in start..start + len {
                let dt = delta.data()[t];
                let b_row = &bm.data()[t * n..(t + 1) * n];
                let c_row = &cm.data()[t * n..(t + 1) * n];
                let (before, rest) = states.split_at_mut(t * d * n);
                let cur = &mut rest[..d * n];
                let prev = (t > start).then(|| &before[(t - 1) * d * n..]);
                let step_decay = &mut decays[t * d * n..(t + 1) * d * n];
                for ch in 0..d {
                    let u = x.data()[t * d + ch];
                    let mut y = 0.0;
                    for s in 0..n {
                        let i = ch * n + s;
                        let carried = match prev {
                            Some(p) => {
                                let decay = (dt * a[i]).exp();
                                step_decay[i] = decay;
                                decay * p[i]
                            }
                            None => 0.0,
                        };
                        let h = carried + (dt * b_row[s]) * u;
                        cur[i] = h;
                        y += c_row[s] * h;
                    }
                    out[t * d + ch] = y + d_skip.data()[ch] * u;
                }
            }
        }
        let rg = self.rg(&[vars.x, vars.delta, vars.b, vars.c, vars.a_log, vars.d_skip]);
        Ok(self.push(
            Tensor::from_parts(vec![t_len, d], out),
            Op::SelectiveScan {
                inputs: vars,
                segments,
                states,
                decays,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `B×C` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<[usize]>) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = matrix_dims(t).ok_or_else(|| shape_err("cross_entropy", t.shape(), &[labels.len()]))?;
        if b != labels.len() || b == 0 {
            return Err(shape_err("cross_entropy", t.shape(), &[labels.len()]));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::contract(format!("cross_entropy: label {y} with {c} classes")));
            }
            total += -log_softmax(t.row(r))[y];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy { logits, labels },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.shape().len() > 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                }
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Returns the gradient buffer of `v`, allocating zeros on first use.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], tape: &Tape, v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; tape.nodes[v.0].value.len()])
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = matrix_dims(&self.nodes[a.0].value).unwrap();
                let n = node.value.cols();
                if wants(a) {
                    let ga = slot(grads, self, a);
                    gemm(m, n, k, g, false, val(b), true, ga, true);
                }
                if wants(b) {
                    let gb = slot(grads, self, b);
                    gemm(k, m, n, val(a), true, g, false, gb, true);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        for (s, &x) in slot(grads, self, v).iter_mut().zip(g) {
                            *s += x;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    for ((s, &x), &y) in slot(grads, self, a).iter_mut().zip(g).zip(bv) {
                        *s += x * y;
                    }
                }
                if wants(b) {
                    let av = val(a);
                    for ((s, &x), &y) in slot(grads, self, b).iter_mut().zip(g).zip(av) {
                        *s += x * y;
                    }
                }
            }
            &Op::Scale(a, f) => {
                for (s, &x) in slot(grads, self, a).iter_mut().zip(g) {
                    *s += x * f;
                }
            }
            &Op::AddRow(a, row) => {
                if wants(a) {
                    for (s, &x) in slot(grads, self, a).iter_mut().zip(g) {
                        *s += x;
                    }
                }
                if wants(row) {
                    let n = node.value.cols();
                    let gr = slot(grads, self, row);
                    for chunk in g.chunks(n) {
                        for (s, &x) in gr.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                }
            }
            &Op::AddCol(a, col) => {
                if wants(a) {
                    for (s, &x) in slot(grads, self, a).iter_mut().zip(g) {
                        *s += x;
                    }
                }
                if wants(col) {
                    let n = node.value.cols();
                    let gc = slot(grads, self, col);
                    for (s, chunk) in gc.iter_mut().zip(g.chunks(n)) {
                        *s += chunk.iter().sum::<f64>();
                    }
                }
            }
            &Op::Sigmoid(a) => {
                for ((s, &x), &y) in slot(grads, self, a).iter_mut().zip(g).zip(out) {
                    *s += x * y * (1.0 - y);
                }
            }
            &Op::Softplus(a) => {
                let av = val(a);
                for ((s, &x), &z) in slot(grads, self, a).iter_mut().zip(g).zip(av) {
                    *s += x * sigmoid(z);
                }
            }
            &Op::Silu(a) => {
                let av = val(a);
                for ((s, &x), &z) in slot(grads, self, a).iter_mut().zip(g).zip(av) {
                    let sg = sigmoid(z);
                    *s += x * sg * (1.0 + z * (1.0 - sg));
                }
            }
            &Op::Exp(a) => {
                for ((s, &x), &y) in slot(grads, self, a).iter_mut().zip(g).zip(out) {
                    *s += x * y;
                }
            }
            &Op::LeakyRelu(a, slope) => {
                let av = val(a);
                for ((s, &x), &z) in slot(grads, self, a).iter_mut().zip(g).zip(av) {
                    *s += if z > 0.0 { x } else { x * slope };
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                let gx = slot(grads, self, x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            &Op::Concat { a, b, outer, a_block, b_block } => {
                let w = a_block + b_block;
                if wants(a) {
                    let ga = slot(grads, self, a);
                    for o in 0..outer {
                        for (s, &x) in ga[o * a_block..(o + 1) * a_block].iter_mut().zip(&g[o * w..o * w + a_block]) {
                            *s += x;
                        }
                    }
                }
                if wants(b) {
                    let gb = slot(grads, self, b);
                    for o in 0..outer {
                        for (s, &x) in gb[o * b_block..(o + 1) * b_block].iter_mut().zip(&g[o * w + a_block..(o + 1) * w]) {
                            *s += x;
                        }
                    }
                }
            }
            &Op::SliceCols { x, start, end } => {
                let n = self.nodes[x.0].value.cols();
                let w = end - start;
                let gx = slot(grads, self, x);
                for (i, chunk) in g.chunks(w).enumerate() {
                    for (s, &v) in gx[i * n + start..i * n + end].iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
            }
            &Op::Sum(x) => {
                for s in slot(grads, self, x).iter_mut() {
                    *s += g[0];
                }
            }
            Op::GatherRows(x, index) => {
                let n = node.value.cols();
                let gx = slot(grads, self, *x);
                for (i, &r) in index.iter().enumerate() {
                    for (s, &v) in gx[r * n..(r + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *s += v;
                    }
                }
            }
            Op::ScatterAddRows(x, index) => {
                let n = node.value.cols();
                let gx = slot(grads, self, *x);
                for (i, &r) in index.iter().enumerate() {
                    for (s, &v) in gx[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *s += v;
                    }
                }
            }
            &Op::HeadDot { q, k, heads, scale } => {
                let w = self.nodes[q.0].value.cols();
                let d = w / heads;
                for (target, other) in [(q, k), (k, q)] {
                    if !wants(target) {
                        continue;
                    }
                    let ov = val(other);
                    let gt = slot(grads, self, target);
                    for (r, grow) in g.chunks(heads).enumerate() {
                        for (h, &gh) in grow.iter().enumerate() {
                            let f = gh * scale;
                            let base = r * w + h * d;
                            for c in 0..d {
                                gt[base + c] += f * ov[base + c];
                            }
                        }
                    }
                }
            }
            Op::GroupSoftmax { x, groups, n_groups } => {
                let h = node.value.cols();
                let mut dot = vec![0.0; n_groups * h];
                for (r, &gr) in groups.iter().enumerate() {
                    for c in 0..h {
                        dot[gr * h + c] += g[r * h + c] * out[r * h + c];
                    }
                }
                let gx = slot(grads, self, *x);
                for (r, &gr) in groups.iter().enumerate() {
                    for c in 0..h {
                        let i = r * h + c;
                        gx[i] += out[i] * (g[i] - dot[gr * h + c]);
                    }
                }
            }
            &Op::HeadMul { alpha, v } => {
                let heads = self.nodes[alpha.0].value.cols();
                let w = node.value.cols();
                let d = w / heads;
                if wants(alpha) {
                    let vv = val(v);
                    let ga = slot(grads, self, alpha);
                    for (r, grow) in g.chunks(w).enumerate() {
                        for h in 0..heads {
                            let mut s = 0.0;
                            for c in h * d..(h + 1) * d {
                                s += grow[c] * vv[r * w + c];
                            }
                            ga[r * heads + h] += s;
                        }
                    }
                }
                if wants(v) {
                    let av = val(alpha);
                    let gv = slot(grads, self, v);
                    for (r, grow) in g.chunks(w).enumerate() {
                        for h in 0..heads {
                            let a = av[r * heads + h];
                            for c in h * d..(h + 1) * d {
                                gv[r * w + c] += grow[c] * a;
                            }
                        }
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let n = node.value.cols();
                let gx = slot(grads, self, *x);
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    for r in start..start + len {
                        for c in 0..n {
                            gx[r * n + c] += g[s * n + c] * inv;
                        }
                    }
                }
            }
            Op::SelectiveScan {
                inputs,
                segments,
                states,
                decays,
            } => {
                self.scan_backward(*inputs, segments, states, decays, g, grads);
            }
            Op::CrossEntropy { logits, labels } => {
                let lt = &self.nodes[logits.0].value;
                let c = lt.cols();
                let inv = g[0] / labels.len() as f64;
                let gl = slot(grads, self, *logits);
                for (r, &y) in labels.iter().enumerate() {
                    let lp = log_softmax(lt.row(r));
                    for k in 0..c {
                        let onehot = if k == y { 1.0 } else { 0.0 };
                        gl[r * c + k] += (lp[k].exp() - onehot) * inv;
                    }
                }
            }
        }
    }

    fn scan_backward(
        &self,
        v: ScanVars,
        segments: &[(usize, usize)],
        states: &[f64],
        decays: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let x = self.nodes[v.x.0].value.data();
        let delta = self.nodes[v.delta.0].value.data();
        let bm = self.nodes[v.b.0].value.data();
        let cm = self.nodes[v.c.0].value.data();
        let a_log = &self.nodes[v.a_log.0].value;
        let d_skip = self.nodes[v.d_skip.0].value.data();
        let (d, n) = matrix_dims(a_log).unwrap();
        let a: Vec<f64> = a_log.data().iter().map(|&l| -l.exp()).collect();
        let t_len = delta.len();

        let mut gx = vec![0.0; t_len * d];
        let mut gdelta = vec![0.0; t_len];
        let mut gb = vec![0.0; t_len * n];
        let mut gc = vec![0.0; t_len * n];
        let mut ga = vec![0.0; d * n];
        let mut gd = vec![0.0; d];
        // gradient flowing into h_t from step t+1
        let mut carry = vec![0.0; d * n];

        for &(start, len) in segments {
            carry.fill(0.0);
            for t in (start..start + len).rev() {
                let dt = delta[t];
                let h_cur = &states[t * d * n..(t + 1) * d * n];
                let h_prev = (t > start).then(|| &states[(t - 1) * d * n..t * d * n]);
                let b_row = &bm[t * n..(t + 1) * n];
                let c_row = &cm[t * n..(t + 1) * n];
                let step_decay = &decays[t * d * n..(t + 1) * d * n];
                for ch in 0..d {
                    let gy = g[t * d + ch];
                    let u = x[t * d + ch];
                    gd[ch] += gy * u;
                    let span = ch * n..(ch + 1) * n;
                    let h_row = &h_cur[span.clone()];
                    let carry_row = &mut carry[span.clone()];
                    let gc_row = &mut gc[t * n..(t + 1) * n];
                    let gb_row = &mut gb[t * n..(t + 1) * n];
                    let mut g_dt = 0.0;
                    let mut g_u = gy * d_skip[ch];
                    for s in 0..n {
                        gc_row[s] += gy * h_row[s];
                        let gh = gy * c_row[s] + carry_row[s];
                        // input term: (dt * B) * u
                        g_dt += gh * b_row[s] * u;
                        gb_row[s] += gh * dt * u;
                        g_u += gh * dt * b_row[s];
                        carry_row[s] = gh;
                    }
                    // carried term: exp(dt * A) * h_prev
                    match h_prev {
                        Some(p) => {
                            let p_row = &p[span.clone()];
                            let dec_row = &step_decay[span.clone()];
                            let a_row = &a[span.clone()];
                            let ga_row = &mut ga[span];
                            for s in 0..n {
                                let gh = carry_row[s];
                                let gdecay = gh * p_row[s] * dec_row[s];
                                g_dt += gdecay * a_row[s];
                                ga_row[s] += gdecay * dt;
                                carry_row[s] = gh * dec_row[s];
                            }
                        }
                        None => carry_row.fill(0.0),
                    }
                    gdelta[t] += g_dt;
                    gx[t * d + ch] += g_u;
                }
            }
        }
        // dA/da_log = A
        for (gl, &ai) in ga.iter_mut().zip(&a) {
            *gl *= ai;
        }
        for (var, buf) in [
            (v.x, gx),
            (v.delta, gdelta),
            (v.b, gb),
            (v.c, gc),
            (v.a_log, ga),
            (v.d_skip, gd),
        ] {
            if self.nodes[var.0].requires_grad {
                let dst = grads[var.0].get_or_insert_with(|| vec![0.0; buf.len()]);
                for (s, x) in dst.iter_mut().zip(buf) {
                    *s += x;
                }
            }
        }
    }
}

/// Log-sum-exp stabilized log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}
