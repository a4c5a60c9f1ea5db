use serde::{Deserialize, Serialize};

use super::special::student_t_two_sided;
use crate::autodiff::Tensor;
use crate::error::{contract, Error, Result};

/// Genes called differentially expressed by a two-sided Welch t-test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegSet {
    /// Ascending gene indices with `p < alpha`.
    pub gene_indices: Vec<usize>,
    /// One p-value per gene.
    pub p_values: Vec<f64>,
}

fn mean_var(col: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = col.clone().sum::<f64>() / n as f64;
    let var = col.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var)
}

/// Welch t-test p-value for one gene; `None` columns are handled by caller.
pub fn welch_p(control: &[f64], perturbed: &[f64]) -> f64 {
    let (n, m) = (control.len(), perturbed.len());
    let (m1, v1) = mean_var(control.iter().copied(), n);
    let (m2, v2) = mean_var(perturbed.iter().copied(), m);
    let s1 = v1 / n as f64;
    let s2 = v2 / m as f64;
    let se2 = s1 + s2;
    if se2 == 0.0 {
        // both groups constant
        return if m1 == m2 { 1.0 } else { 0.0 };
    }
    let t = (m2 - m1) / se2.sqrt();
    let df = se2 * se2 / (s1 * s1 / (n as f64 - 1.0) + s2 * s2 / (m as f64 - 1.0));
    student_t_two_sided(t, df)
}

pub fn welch_t_deg(control: &Tensor, perturbed: &Tensor, alpha: f64) -> Result<DegSet> {
    if control.cols() != perturbed.cols() {
        return Err(Error::Shape {
            op: "welch_t_deg",
            lhs: control.shape().to_vec(),
            rhs: perturbed.shape().to_vec(),
        });
    }
    if control.rows() < 2 || perturbed.rows() < 2 {
        return Err(contract("Welch t-test needs at least 2 cells per group"));
    }
    let g = control.cols();
    let column = |t: &Tensor, j: usize| -> Vec<f64> { (0..t.rows()).map(|i| t.at(i, j)).collect() };
    let p_values: Vec<f64> = (0..g)
        .map(|j| welch_p(&column(control, j), &column(perturbed, j)))
        .collect();
    let gene_indices = p_values
        .iter()
        .enumerate()
        .filter(|(_, &p)| p < alpha)
        .map(|(j, _)| j)
        .collect();
    Ok(DegSet {
        gene_indices,
        p_values,
    })
}
