use std::cmp::Ordering;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Total order on tensors used to put symmetric two-sample statistics into
/// a canonical argument order, so that `f(a, b)` and `f(b, a)` run the same
/// floating-point operations.
pub(crate) fn canonical_cmp(a: &Tensor, b: &Tensor) -> Ordering {
    a.shape().cmp(b.shape()).then_with(|| {
        for (x, y) in a.data().iter().zip(b.data()) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        Ordering::Equal
    })
}

/// Energy distance between the row clouds of `a` and `b` on a tape
/// (V-statistic: within-set means include the zero diagonal).
pub fn energy_distance_var(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let (n, m) = {
        let (va, vb) = (tape.value(a), tape.value(b));
        (va.rows(), vb.rows())
    };
    if n < 2 || m < 2 {
        return Err(contract(format!(
            "energy distance needs at least 2 points per cloud, got {n} and {m}"
        )));
    }
    let swap = canonical_cmp(&tape.value(a), &tape.value(b)) == Ordering::Greater;
    let (a, b) = if swap { (b, a) } else { (a, b) };
    let cross = tape.mean_all(tape.pairwise_euclidean(a, b)?);
    let within_a = tape.mean_all(tape.pairwise_euclidean(a, a)?);
    let within_b = tape.mean_all(tape.pairwise_euclidean(b, b)?);
    let within = tape.add(within_a, within_b)?;
    tape.sub(tape.scale(cross, 2.0), within)
}

/// Energy distance on plain tensors; shares the tape computation.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let e = energy_distance_var(&tape, va, vb)?;
    let value = tape.value(e).item();
    Ok(value)
}
