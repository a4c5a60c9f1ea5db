//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward closure on constant
//! leaves, so it shares no code with the reverse sweep it validates.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `step` on every input element.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out).item();
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let err = rel_err(a, numeric);
            if err > report.max_rel_err || err.is_nan() {
                report = GradCheckReport {
                    max_rel_err: err,
                    worst: (i, e),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor to a scalar with fixed weights: `sum(out * weights)`.
/// A generic projection keeps every output element on the gradient path.
pub fn project(tape: &Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(weights.clone().reshape(shape)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}
