use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamIndex {
    pub param: usize,
    pub element: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// One-sided slopes differing by more than this (relative to their
    /// magnitude) mark a non-differentiable point.
    pub kink_tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            kink_tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Element with the largest relative error.
    pub worst: Option<ParamIndex>,
    /// Elements where the forward and backward one-sided slopes disagree.
    pub non_differentiable: Vec<ParamIndex>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance && self.non_differentiable.is_empty()
    }
}

fn eval<F>(build: &F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn scalar_of<F>(build: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = eval(build, params)?;
    tape.value(out).item().ok_or(crate::Error::NotScalar {
        shape: tape.value(out).shape().into(),
    })
}

/// Compares tape gradients of a scalar expression with central finite
/// differences, element by element over every parameter.
///
/// `build` must be deterministic in its inputs; any sampling has to be frozen
/// outside of it.
pub fn grad_check<F>(params: &[Tensor], build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = eval(&build, params)?;
    let f0 = tape.value(out).item().ok_or(crate::Error::NotScalar {
        shape: tape.value(out).shape().into(),
    })?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("params track gradients"))
        .collect();

    let h = opts.step;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        non_differentiable: Vec::new(),
        checked: 0,
        tolerance: opts.tolerance,
    };
    for (p, grad) in analytic.iter().enumerate() {
        for e in 0..params[p].numel() {
            let x = params[p].data()[e];
            work[p].data_mut()[e] = x + h;
            let fp = scalar_of(&build, &work)?;
            work[p].data_mut()[e] = x - h;
            let fm = scalar_of(&build, &work)?;
            work[p].data_mut()[e] = x;

            let numeric = (fp - fm) / (2.0 * h);
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            let scale = fwd.abs().max(bwd.abs()).max(1.0);
            let at = ParamIndex { param: p, element: e };
            if (fwd - bwd).abs() > opts.kink_tolerance * scale {
                report.non_differentiable.push(at);
            }
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(at);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
