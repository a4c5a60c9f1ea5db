use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{train_and_evaluate, RunRecord, TrainConfig};
use crate::error::{contract, Result};
use crate::metrics::PcaBasis;
use crate::model::{Model, ModelKind};
use crate::retrieval::PerturbationDb;
use crate::rng::SplitMix64;
use crate::selector::GumbelNoise;
use crate::stats::{jaccard, jaccard_overlap, top_n, JaccardMatrix, SelectionSets};
use crate::synthdata::{Dataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    K,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub record: RunRecord,
    /// Mean included candidates per cell at the last validation.
    pub final_selected_count: f64,
    /// Metric -> overall test mean.
    pub test_overall: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub entries: Vec<SweepEntry>,
}

/// One training run per value of `axis`; other settings from `base`.
pub fn sweep(
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    dataset: &Dataset,
    db: &PerturbationDb,
    pca: &PcaBasis,
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(contract("sweep needs at least one value"));
    }
    let mut entries = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::Lambda => cfg.lambda_sparse = value,
            SweepAxis::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(crate::error::config("K", "a positive integer"));
                }
                cfg.k = value as usize;
            }
        }
        let out = train_and_evaluate(&cfg, dataset, db, pca)?;
        let test_overall = out
            .record
            .final_metrics
            .as_ref()
            .map(|r| {
                r.aggregate
                    .get(crate::metrics::OVERALL)
                    .map(|m| m.iter().map(|(k, s)| (k.clone(), s.mean)).collect())
                    .unwrap_or_default()
            })
            .unwrap_or_default();
        entries.push(SweepEntry {
            value,
            final_selected_count: out.record.final_selected_count(),
            record: out.record,
            test_overall,
        });
    }
    Ok(SweepReport { axis, entries })
}

/// Expected overlap `N / (2K - N)` of two random `N`-subsets of `K`
/// candidates (ratio of expected intersection and union sizes).
pub fn chance_overlap(top: usize, k: usize) -> f64 {
    top as f64 / (2 * k - top) as f64
}

/// Query perturbations for the overlap analysis: the target type's test
/// perturbations, or every perturbation when no split was made.
fn queries(dataset: &Dataset) -> Vec<String> {
    let set: BTreeSet<String> = match &dataset.target_cell_type {
        Some(t) => dataset
            .samples
            .iter()
            .filter(|s| &s.cell_type == t && s.split == Split::Test)
            .map(|s| s.pert_id.clone())
            .collect(),
        None => dataset.samples.iter().map(|s| s.pert_id.clone()).collect(),
    };
    set.into_iter().collect()
}

/// Top-`top` most frequently included candidates per (cell type, query),
/// counting hard decisions over cells and `passes` Gumbel draws.
pub fn selection_sets(
    model: &Model,
    dataset: &Dataset,
    db: &PerturbationDb,
    queries: &[String],
    top: usize,
    passes: usize,
    noise_seed: u64,
) -> Result<SelectionSets> {
    if model.config.kind != ModelKind::PtRag {
        return Err(contract("selection analysis needs a pt_rag model"));
    }
    if top == 0 {
        return Err(crate::error::config("top_n", ">= 1"));
    }
    let wanted: BTreeSet<&String> = queries.iter().collect();
    let mut rng = SplitMix64::derive(noise_seed, 0x5e1);
    let mut out = SelectionSets::new();
    let mut any = false;
    for s in dataset.samples.iter().filter(|s| wanted.contains(&s.pert_id)) {
        let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
        for _ in 0..passes.max(1) {
            let (_, sel) = model.predict(&s.x_ctrl, s.pert_index, db, GumbelNoise::Sample(&mut rng))?;
            let sel = sel.expect("pt_rag selection");
            let candidates = db.top_k_by_index(s.pert_index, model.config.k)?.candidate_indices;
            for (c, n) in candidates.iter().zip(sel.mask.candidate_counts()) {
                *counts.entry(*c).or_insert(0) += n as u64;
            }
        }
        any |= counts.values().any(|&c| c > 0);
        out.entry(s.cell_type.clone()).or_default().insert(s.pert_id.clone(), top_n(&counts, top));
    }
    if !any {
        return Err(contract(
            "non-selective checkpoint: no candidate was ever included; lower lambda_sparse and retrain",
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    pub matrix: JaccardMatrix,
    pub top_n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub queries: Vec<String>,
    pub chance_level: f64,
    pub off_diagonal_mean: f64,
    /// Cell type -> overlap between two independent noise draws.
    pub repeat_overlap: BTreeMap<String, f64>,
    pub repeat_mean: f64,
}

/// Cross-cell-type overlap of selected contexts, with a same-type baseline
/// from a second, independently seeded pass.
pub fn jaccard_analysis(
    model: &Model,
    dataset: &Dataset,
    db: &PerturbationDb,
    top: usize,
    passes: usize,
    seed: u64,
) -> Result<JaccardReport> {
    let qs = queries(dataset);
    if qs.is_empty() {
        return Err(contract("no query perturbations for the overlap analysis"));
    }
    let first = selection_sets(model, dataset, db, &qs, top, passes, seed)?;
    let second = selection_sets(model, dataset, db, &qs, top, passes, seed.wrapping_add(1))?;
    let matrix = jaccard_overlap(&first)?;
    let mut repeat_overlap = BTreeMap::new();
    for (ct, sets) in &first {
        let scores: Vec<f64> = sets.iter().filter_map(|(p, a)| jaccard(a, &second[ct][p])).collect();
        if !scores.is_empty() {
            repeat_overlap.insert(ct.clone(), scores.iter().sum::<f64>() / scores.len() as f64);
        }
    }
    let repeat_mean = if repeat_overlap.is_empty() {
        0.0
    } else {
        repeat_overlap.values().sum::<f64>() / repeat_overlap.len() as f64
    };
    Ok(JaccardReport {
        off_diagonal_mean: matrix.off_diagonal_mean(),
        matrix,
        top_n: top,
        k: model.config.k,
        queries: qs,
        chance_level: chance_overlap(top, model.config.k),
        repeat_overlap,
        repeat_mean,
    })
}
