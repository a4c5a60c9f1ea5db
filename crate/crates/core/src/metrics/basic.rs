use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Pearson correlation; `None` when either input has zero variance or fewer
/// than two entries.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// `(pearson, spearman)` between predicted and observed effects.
pub fn correlations(pred_effect: &[f64], true_effect: &[f64]) -> (Option<f64>, Option<f64>) {
    (
        pearson(pred_effect, true_effect),
        spearman(pred_effect, true_effect),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructionErrors {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
}

pub fn reconstruction_errors(pred: &Tensor, target: &Tensor) -> Result<ReconstructionErrors> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "reconstruction_errors",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.len().max(1) as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    let mse = se / n;
    Ok(ReconstructionErrors {
        mse,
        rmse: mse.sqrt(),
        mae: ae / n,
    })
}
