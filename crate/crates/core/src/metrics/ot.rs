use std::cmp::Ordering;

use super::energy::canonical_cmp;
use crate::autodiff::{pairwise_distances, Tensor};
use crate::error::{contract, Error, Result};

/// Minimum-cost perfect matching on a square cost matrix (Hungarian
/// algorithm with potentials, `O(n^3)`). Returns `assignment[row] = col`.
pub fn min_cost_assignment(cost: &Tensor) -> Result<Vec<usize>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(contract(format!(
            "assignment needs a square cost matrix, got {:?}",
            cost.shape()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Exact Wasserstein distance between two equal-size uniform empirical
/// measures. Order 1 is the mean Euclidean cost of the optimal matching;
/// order 2 is the mean *squared* cost (take the square root for `W2`
/// proper).
pub fn wasserstein(a: &Tensor, b: &Tensor, order: u8) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "wasserstein",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if order != 1 && order != 2 {
        return Err(contract(format!(
            "wasserstein order must be 1 or 2, got {order}"
        )));
    }
    let (a, b) = match canonical_cmp(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let n = a.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut cost = pairwise_distances(a, b)?;
    if order == 2 {
        for c in cost.data_mut() {
            *c *= *c;
        }
    }
    let assignment = min_cost_assignment(&cost)?;
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.at(i, j))
        .sum();
    Ok(total / n as f64)
}
