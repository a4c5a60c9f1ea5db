use std::cmp::Ordering;

use super::energy::canonical_cmp;
use crate::autodiff::{pairwise_distances, Tensor};
use crate::error::{contract, Error, Result};

/// Median of the nonzero pairwise distances in the pooled sample, or 1 when
/// every distance is zero.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    }
}

fn mean_kernel(x: &Tensor, y: &Tensor, gamma: f64) -> Result<f64> {
    let d = pairwise_distances(x, y)?;
    let s: f64 = d.data().iter().map(|v| (-gamma * v * v).exp()).sum();
    Ok(s / d.len() as f64)
}

/// Biased (V-statistic) squared MMD with an RBF kernel whose bandwidth is
/// the pooled median heuristic.
pub fn mmd_rbf(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "mmd_rbf",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(contract("mmd needs at least one point per cloud"));
    }
    let (a, b) = match canonical_cmp(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let sigma = median_bandwidth(a, b);
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let kaa = mean_kernel(a, a, gamma)?;
    let kbb = mean_kernel(b, b, gamma)?;
    let kab = mean_kernel(a, b, gamma)?;
    // clamp tiny negative roundoff; the V-statistic is a squared norm
    Ok(((kaa + kbb) - 2.0 * kab).max(0.0))
}
