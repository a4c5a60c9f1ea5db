//! Straight-through Gumbel-Softmax include/exclude decisions over retrieved
//! candidates.
//!
//! Logits are laid out `[(S*K) x 2]` with column 0 = exclude and
//! column 1 = include; row `i*K + k` belongs to cell `i`, candidate `k`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, Result};
use crate::rng::SplitMix64;

pub const EXCLUDE: usize = 0;
pub const INCLUDE: usize = 1;

const UNIFORM_CLAMP: f64 = 1e-12;

/// Inverse CDF of Gumbel(0, 1).
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| gumbel_from_uniform(rng.next_f64()))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("gumbel shape")
}

/// Where the Gumbel perturbation comes from.
pub enum GumbelNoise<'a> {
    /// Fresh draws (training).
    Sample(&'a mut SplitMix64),
    /// Caller-provided draws, `[(S*K) x 2]` (gradient tests).
    Frozen(&'a Tensor),
    /// All-zero noise: hard decisions are the argmax of the logits.
    Zero,
}

/// Per-cell binary decisions with their soft surrogates.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    /// `[S x K]`, entries exactly 0 or 1.
    pub hard: Tensor,
    /// `[S x K]` include-class probabilities.
    pub soft: Tensor,
    pub tau: f64,
}

impl SelectionMask {
    pub fn cells(&self) -> usize {
        self.hard.rows()
    }

    pub fn candidates(&self) -> usize {
        self.hard.cols()
    }

    /// Mean number of included candidates per cell.
    pub fn mean_selected(&self) -> f64 {
        self.hard.data().iter().sum::<f64>() / self.cells() as f64
    }

    /// How many cells included each candidate (per-population reduction).
    pub fn candidate_counts(&self) -> Vec<usize> {
        let k = self.candidates();
        let mut counts = vec![0; k];
        for r in 0..self.cells() {
            for (c, v) in counts.iter_mut().zip(self.hard.row(r)) {
                if *v == 1.0 {
                    *c += 1;
                }
            }
        }
        counts
    }
}

/// Output of [`gumbel_softmax_select`].
#[derive(Clone, Debug)]
pub struct Selection {
    /// `[(S*K) x 1]` straight-through weights: value = hard, gradient = soft.
    pub weights: Var,
    /// `[(S*K) x 1]` soft include probabilities on the tape.
    pub soft: Var,
    pub mask: SelectionMask,
}

/// Gumbel-Softmax over the two-class axis with hard argmax decisions.
/// Exact ties (possible only with zero noise) resolve to include.
pub fn gumbel_softmax_select(
    tape: &Tape,
    logits: Var,
    cells: usize,
    tau: f64,
    noise: GumbelNoise<'_>,
) -> Result<Selection> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(contract(format!("temperature must be positive, got {tau}")));
    }
    let (rows, cols) = {
        let v = tape.value(logits);
        if !v.is_finite() {
            return Err(contract("selection logits must be finite"));
        }
        (v.rows(), v.cols())
    };
    if cols != 2 || v_shape_rank(tape, logits) != 2 {
        return Err(contract(format!(
            "selection logits must be [N x 2], got [{rows} x {cols}]"
        )));
    }
    if cells == 0 || rows % cells != 0 {
        return Err(contract(format!(
            "{rows} logit rows do not split into {cells} cells"
        )));
    }
    let k = rows / cells;
    let perturbed = match noise {
        GumbelNoise::Zero => logits,
        GumbelNoise::Sample(rng) => {
            let g = tape.constant(sample_gumbel(&[rows, 2], rng));
            tape.add(logits, g)?
        }
        GumbelNoise::Frozen(g) => {
            let g = tape.constant(g.clone());
            tape.add(logits, g)?
        }
    };
    let scaled = tape.scale(perturbed, 1.0 / tau);
    let probs = tape.softmax_rows(scaled)?;
    let soft = tape.slice_cols(probs, INCLUDE, INCLUDE + 1)?;

    let hard_values: Vec<f64> = {
        let p = tape.value(perturbed);
        (0..rows)
            .map(|r| {
                if p.at(r, INCLUDE) >= p.at(r, EXCLUDE) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    let hard = tape.constant(Tensor::matrix(rows, 1, hard_values.clone())?);
    let weights = tape.straight_through(hard, soft)?;

    let soft_values = tape.value(soft).data().to_vec();
    let mask = SelectionMask {
        hard: Tensor::matrix(cells, k, hard_values)?,
        soft: Tensor::matrix(cells, k, soft_values)?,
        tau,
    };
    Ok(Selection {
        weights,
        soft,
        mask,
    })
}

fn v_shape_rank(tape: &Tape, v: Var) -> usize {
    tape.value(v).shape().len()
}
