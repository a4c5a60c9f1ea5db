use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract, Error, Result};

pub const DEFAULT_COMPONENTS: usize = 50;

/// Principal axes fitted on training cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `[G x q]`, orthonormal columns in descending variance order.
    pub components: Tensor,
    pub eigenvalues: Vec<f64>,
    pub fitted_on: String,
}

struct Eigen {
    mean: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    values: Vec<f64>,
    rank: usize,
}

fn eigen(train: &Tensor) -> Eigen {
    let (n, g) = (train.rows(), train.cols());
    let mean = train.mean_rows();
    let centered = DMatrix::from_fn(n, g, |i, j| train.at(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = order
        .iter()
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // sign rule: largest-magnitude entry positive (first one on ties)
            let pivot =
                v.iter().enumerate().fold(
                    0,
                    |best, (i, x)| if x.abs() > v[best].abs() { i } else { best },
                );
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let tol = top * g as f64 * 1e-12;
    let rank = if top == 0.0 {
        0
    } else {
        values.iter().filter(|&&l| l > tol).count()
    };
    Eigen {
        mean,
        vectors,
        values,
        rank,
    }
}

/// Top-`q` principal components of the sample covariance.
pub fn fit_pca(train: &Tensor, q: usize, tag: &str) -> Result<PcaBasis> {
    if q == 0 {
        return Err(contract("pca needs q >= 1"));
    }
    if train.rows() < q + 1 {
        return Err(contract(format!(
            "pca with q = {q} needs at least {} training cells, got {}",
            q + 1,
            train.rows()
        )));
    }
    let e = eigen(train);
    if e.rank < q {
        return Err(contract(format!(
            "covariance rank {} is below q = {q}; achievable q is at most {}",
            e.rank, e.rank
        )));
    }
    Ok(assemble(e, q, tag))
}

/// Fits `min(50, rank)` components and never fails on rank deficiency.
pub fn fit_pca_auto(train: &Tensor, tag: &str) -> Result<PcaBasis> {
    if train.rows() < 2 {
        return Err(contract("pca needs at least 2 training cells"));
    }
    let e = eigen(train);
    let q = DEFAULT_COMPONENTS.min(e.rank).min(train.rows() - 1).max(1);
    Ok(assemble(e, q, tag))
}

fn assemble(e: Eigen, q: usize, tag: &str) -> PcaBasis {
    let g = e.mean.len();
    let mut data = vec![0.0; g * q];
    for (k, v) in e.vectors.iter().take(q).enumerate() {
        for (i, x) in v.iter().enumerate() {
            data[i * q + k] = *x;
        }
    }
    PcaBasis {
        mean: e.mean,
        components: Tensor::matrix(g, q, data).expect("shape"),
        eigenvalues: e.values[..q].to_vec(),
        fitted_on: tag.to_string(),
    }
}

impl PcaBasis {
    pub fn q(&self) -> usize {
        self.components.cols()
    }

    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape {
                op: "pca_project",
                lhs: x.shape().to_vec(),
                rhs: self.components.shape().to_vec(),
            });
        }
        let mut centered = x.clone();
        let g = x.cols();
        for (i, v) in centered.data_mut().iter_mut().enumerate() {
            *v -= self.mean[i % g];
        }
        centered.matmul(&self.components)
    }

    pub fn reconstruct(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.matmul(&self.components.transpose())?;
        let g = x.cols();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += self.mean[i % g];
        }
        Ok(x)
    }
}
