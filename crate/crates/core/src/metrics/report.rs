use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::basic::{correlations, reconstruction_errors};
use super::deg::welch_t_deg;
use super::energy::energy_distance;
use super::mmd::mmd_rbf;
use super::ot::wasserstein;
use super::pca::PcaBasis;
use crate::autodiff::Tensor;
use crate::error::{contract, Result};
use crate::rng::SplitMix64;

pub const DEG_ALPHA: f64 = 0.05;

pub const W2_CONVENTION: &str =
    "w2 is the mean squared transport cost under the optimal matching (W2 squared); w2_root is its square root";

/// Metric names in report order.
pub const METRIC_NAMES: [&str; 11] = [
    "pearson_deg",
    "spearman_deg",
    "mse",
    "rmse",
    "mae",
    "mse_pca50",
    "w1",
    "w2",
    "w2_root",
    "energy",
    "mmd",
];

/// Lower is better for every metric except the two correlations.
pub fn higher_is_better(metric: &str) -> bool {
    matches!(metric, "pearson_deg" | "spearman_deg")
}

/// Scores for one (perturbation, cell type) population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub perturbation: String,
    pub cell_type: String,
    pub n_cells: usize,
    pub n_deg: usize,
    pub pearson_deg: Option<f64>,
    pub spearman_deg: Option<f64>,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub mse_pca50: f64,
    pub w1: f64,
    pub w2: f64,
    pub w2_root: f64,
    pub energy: f64,
    pub mmd: f64,
}

impl MetricsRow {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "pearson_deg" => self.pearson_deg,
            "spearman_deg" => self.spearman_deg,
            "mse" => Some(self.mse),
            "rmse" => Some(self.rmse),
            "mae" => Some(self.mae),
            "mse_pca50" => Some(self.mse_pca50),
            "w1" => Some(self.w1),
            "w2" => Some(self.w2),
            "w2_root" => Some(self.w2_root),
            "energy" => Some(self.energy),
            "mmd" => Some(self.mmd),
            _ => None,
        }
    }
}

fn subsample(x: &Tensor, n: usize, rng: &mut SplitMix64) -> Tensor {
    if x.rows() == n {
        return x.clone();
    }
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(n);
    idx.sort_unstable();
    x.select_rows(&idx)
}

fn column_means(x: &Tensor) -> Vec<f64> {
    x.mean_rows()
}

/// Scores predicted cells against observed cells of the same population.
/// Unequal populations are subsampled without replacement to the smaller
/// size using `rng`.
pub fn evaluate_population(
    perturbation: &str,
    cell_type: &str,
    control: &Tensor,
    predicted: &Tensor,
    observed: &Tensor,
    pca: &PcaBasis,
    rng: &mut SplitMix64,
) -> Result<MetricsRow> {
    if predicted.rows() < 2 || observed.rows() < 2 {
        return Err(contract(
            "evaluation needs at least 2 predicted and 2 observed cells",
        ));
    }
    let n = predicted.rows().min(observed.rows());
    let pred = subsample(predicted, n, rng);
    let obs = subsample(observed, n, rng);

    let degs = welch_t_deg(control, &obs, DEG_ALPHA)?;
    let ctrl_mean = column_means(control);
    let pred_mean = column_means(&pred);
    let obs_mean = column_means(&obs);
    let (pearson_deg, spearman_deg) = if degs.gene_indices.len() >= 2 {
        let pe: Vec<f64> = degs
            .gene_indices
            .iter()
            .map(|&g| pred_mean[g] - ctrl_mean[g])
            .collect();
        let te: Vec<f64> = degs
            .gene_indices
            .iter()
            .map(|&g| obs_mean[g] - ctrl_mean[g])
            .collect();
        correlations(&pe, &te)
    } else {
        (None, None)
    };

    let recon = reconstruction_errors(&pred, &obs)?;
    let pz = pca.project(&pred)?;
    let oz = pca.project(&obs)?;
    let pca_err = reconstruction_errors(&pz, &oz)?;
    let w2 = wasserstein(&pz, &oz, 2)?;
    Ok(MetricsRow {
        perturbation: perturbation.to_string(),
        cell_type: cell_type.to_string(),
        n_cells: n,
        n_deg: degs.gene_indices.len(),
        pearson_deg,
        spearman_deg,
        mse: recon.mse,
        rmse: recon.rmse,
        mae: recon.mae,
        mse_pca50: pca_err.mse,
        w1: wasserstein(&pz, &oz, 1)?,
        w2,
        w2_root: w2.sqrt(),
        energy: energy_distance(&pz, &oz)?,
        mmd: mmd_rbf(&pz, &oz)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean, std, n })
    }
}

/// Group name -> metric -> summary. Groups are the cell types plus
/// `"overall"`.
pub type Aggregate = BTreeMap<String, BTreeMap<String, Summary>>;

pub const OVERALL: &str = "overall";

pub fn aggregate(rows: &[MetricsRow]) -> Aggregate {
    // sort first so the reduction order does not depend on row order
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.cell_type, &a.perturbation).cmp(&(&b.cell_type, &b.perturbation)));
    let mut groups: BTreeMap<String, Vec<&MetricsRow>> = BTreeMap::new();
    for r in &sorted {
        groups.entry(r.cell_type.clone()).or_default().push(r);
        groups.entry(OVERALL.to_string()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(group, rs)| {
            let metrics = METRIC_NAMES
                .iter()
                .filter_map(|&m| {
                    let vals: Vec<f64> = rs.iter().filter_map(|r| r.get(m)).collect();
                    Summary::of(&vals).map(|s| (m.to_string(), s))
                })
                .collect();
            (group, metrics)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub seed: u64,
    pub w2_convention: String,
    pub pca_components: usize,
    pub rows: Vec<MetricsRow>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn new(model: &str, seed: u64, pca_components: usize, rows: Vec<MetricsRow>) -> Self {
        let aggregate = aggregate(&rows);
        MetricsReport {
            model: model.to_string(),
            seed,
            w2_convention: W2_CONVENTION.to_string(),
            pca_components,
            rows,
            aggregate,
        }
    }

    pub fn overall(&self, metric: &str) -> Option<Summary> {
        self.aggregate
            .get(OVERALL)
            .and_then(|m| m.get(metric))
            .copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pca::fit_pca;

    fn setup(rng: &mut SplitMix64) -> (Tensor, Tensor, Tensor, PcaBasis) {
        let (n, g) = (12, 5);
        let ctrl = Tensor::matrix(n, g, (0..n * g).map(|_| rng.next_f64()).collect()).unwrap();
        let obs = Tensor::matrix(
            n,
            g,
            (0..n * g)
                .map(|i| {
                    rng.next_f64()
                        + if i % g < 3 {
                            3.0 * (i % g) as f64 + 2.0
                        } else {
                            0.0
                        }
                })
                .collect(),
        )
        .unwrap();
        let pred = Tensor::matrix(
            n + 4,
            g,
            (0..(n + 4) * g).map(|_| rng.next_f64() * 2.0).collect(),
        )
        .unwrap();
        let pca = fit_pca(&ctrl, 3, "train").unwrap();
        (ctrl, pred, obs, pca)
    }

    #[test]
    fn row_invariants() {
        let mut rng = SplitMix64::new(21);
        let (ctrl, pred, obs, pca) = setup(&mut rng);
        let row = evaluate_population("p", "c", &ctrl, &pred, &obs, &pca, &mut rng).unwrap();
        assert_eq!(row.n_cells, 12);
        assert!((row.rmse * row.rmse - row.mse).abs() < 1e-12);
        assert!(row.w1 >= 0.0 && row.w2 >= 0.0 && row.energy >= 0.0 && row.mmd >= 0.0);
        assert!(row.n_deg >= 3);
        assert!(row.pearson_deg.is_some());
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let mut rng = SplitMix64::new(22);
        let (ctrl, _, obs, pca) = setup(&mut rng);
        let row = evaluate_population("p", "c", &ctrl, &obs, &obs, &pca, &mut rng).unwrap();
        assert_eq!((row.mse, row.w1, row.w2, row.energy), (0.0, 0.0, 0.0, 0.0));
        assert!(row.mmd.abs() < 1e-12);
        assert!((row.pearson_deg.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_order_independent() {
        let mk = |p: &str, c: &str, v: f64| MetricsRow {
            perturbation: p.into(),
            cell_type: c.into(),
            n_cells: 2,
            n_deg: 0,
            pearson_deg: None,
            spearman_deg: Some(v),
            mse: v,
            rmse: v.sqrt(),
            mae: v,
            mse_pca50: v,
            w1: v,
            w2: v,
            w2_root: v.sqrt(),
            energy: v,
            mmd: v,
        };
        let rows = vec![mk("a", "x", 0.1), mk("b", "x", 0.7), mk("a", "y", 0.3)];
        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(aggregate(&rows), aggregate(&rev));
        let agg = aggregate(&rows);
        let x = agg["x"]["mse"];
        assert!((x.mean - 0.4).abs() < 1e-15);
        assert!((x.std - (0.18f64).sqrt()).abs() < 1e-12);
        assert_eq!(agg[OVERALL]["mse"].n, 3);
        assert!(!agg[OVERALL].contains_key("pearson_deg"));
    }
}
