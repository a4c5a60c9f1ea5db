//! Evaluation metrics: differential expression, correlations,
//! reconstruction errors, PCA and distributional distances.

mod basic;
mod deg;
mod energy;
mod mmd;
mod ot;
mod pca;
mod report;
pub mod special;

pub use basic::{
    average_ranks, correlations, pearson, reconstruction_errors, spearman, ReconstructionErrors,
};
pub use deg::{welch_p, welch_t_deg, DegSet};
pub use energy::{energy_distance, energy_distance_var};
pub use mmd::{median_bandwidth, mmd_rbf};
pub use ot::{min_cost_assignment, wasserstein};
pub use pca::{fit_pca, fit_pca_auto, PcaBasis, DEFAULT_COMPONENTS};
pub use report::{
    aggregate, evaluate_population, higher_is_better, Aggregate, MetricsReport, MetricsRow,
    Summary, DEG_ALPHA, METRIC_NAMES, OVERALL, W2_CONVENTION,
};
