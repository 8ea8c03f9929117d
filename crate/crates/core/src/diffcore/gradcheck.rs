//! Central finite-difference gradient checking.

use super::tensor::Tensor;
use super::trace::{Trace, Var};
use crate::error::Result;

/// Magnitude below which errors are measured absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;
/// One-sided slopes disagreeing by more than this (relative) mark a kink
/// or max tie inside `[x − h, x + h]`; such coordinates are skipped.
const KINK_TOL: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Trace, &[Var]) -> Result<Var>,
{
    let mut tr = Trace::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tr.constant(t)).collect();
    let out = f(&mut tr, &vars)?;
    Ok(tr.item(out))
}

/// Analytic gradient of the scalar `f` with respect to every input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Trace, &[Var]) -> Result<Var>,
{
    let mut tr = Trace::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tr.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&mut tr, &vars)?;
    tr.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tr.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

/// Compares supplied gradients against `(f(x+h) − f(x−h)) / 2h` coordinate-wise.
pub fn compare_gradients<F>(f: &F, inputs: &[Tensor], analytic: &[Vec<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Trace, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.numel() {
            let x0 = t.values()[ci];
            let f0 = eval(f, &work)?;
            work[ti].values_mut()[ci] = x0 + h;
            let fp = eval(f, &work)?;
            work[ti].values_mut()[ci] = x0 - h;
            let fm = eval(f, &work)?;
            work[ti].values_mut()[ci] = x0;
            let central = (fp - fm) / (2.0 * h);
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            if (fwd - bwd).abs() > KINK_TOL * central.abs().max(1.0) {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let e = rel_err(analytic[ti][ci], central);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((ti, ci));
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

/// Runs `f` once with gradient tracking and checks the result numerically.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Trace, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    compare_gradients(&f, inputs, &analytic, h, tol)
}
