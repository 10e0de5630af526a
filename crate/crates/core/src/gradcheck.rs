//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Agreement rule: absolute error within `abs` or relative error within `rel`.
pub fn agrees(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= abs || err <= rel * analytic.abs().max(numeric.abs())
}

/// Evaluates `f` on a fresh tape with every tensor in `params` as a
/// gradient-tracked leaf and returns the scalar loss plus its gradients.
pub fn analytic<F>(params: &[Tensor], f: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compares tape gradients of `f` against central differences with `step`
/// on every scalar of every tensor in `params`.
pub fn check<F>(params: &[Tensor], step: f64, rel: f64, abs: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, grads) = analytic(params, &f)?;
    let mut work = params.to_vec();
    let mut report = GradReport::default();
    for (ti, grad) in grads.iter().enumerate() {
        for i in 0..work[ti].len() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + step;
            let plus = evaluate(&work, &f)?;
            work[ti].data_mut()[i] = orig - step;
            let minus = evaluate(&work, &f)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(err);
            let scale = a.abs().max(numeric.abs());
            if scale > 0.0 {
                report.max_rel_err = report.max_rel_err.max(err / scale);
            }
            if !agrees(a, numeric, rel, abs) {
                report.mismatches.push(Mismatch {
                    tensor: ti,
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// [`check`] with the default step and tolerances.
pub fn check_default<F>(params: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(params, DEFAULT_STEP, REL_TOL, ABS_TOL, f)
}
