use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{train_and_evaluate, TrainConfig, TrainOutcome};
use crate::error::{contract, Result};
use crate::metrics::{MetricsReport, PcaBasis};
use crate::model::ModelKind;
use crate::retrieval::PerturbationDb;
use crate::stats::{benjamini_hochberg, mann_whitney_u, significance_marker, UMethod};
use crate::synthdata::Dataset;

/// Metrics entering the significance correction, in table order.
pub const COMPARED_METRICS: [&str; 10] = [
    "pearson_deg",
    "spearman_deg",
    "mse",
    "rmse",
    "mae",
    "mse_pca50",
    "w1",
    "w2",
    "energy",
    "mmd",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub label: String,
    pub kind: ModelKind,
    pub seeds: Vec<u64>,
    /// Metric -> overall test mean for each seed.
    pub per_seed: BTreeMap<String, Vec<f64>>,
    /// Metric -> median over seeds of the overall test mean.
    pub median: BTreeMap<String, f64>,
    /// Metric -> mean of the per-perturbation samples used in the tests.
    pub mean: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceEntry {
    pub reference: String,
    pub model: String,
    pub metric: String,
    pub u: f64,
    pub method: UMethod,
    pub p_raw: f64,
    pub p_fdr: f64,
    pub marker: String,
    pub n_reference: usize,
    pub n_model: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub reference: String,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelSummary>,
    pub entries: Vec<SignificanceEntry>,
}

impl CompareReport {
    pub fn entry(&self, model: &str, metric: &str) -> Option<&SignificanceEntry> {
        self.entries.iter().find(|e| e.model == model && e.metric == metric)
    }

    pub fn summary(&self, label: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.label == label)
    }
}

fn labels(configs: &[TrainConfig]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    configs
        .iter()
        .map(|c| {
            let name = c.model_kind.name();
            let n = seen.entry(name).or_insert(0);
            *n += 1;
            if *n == 1 {
                name.to_string()
            } else {
                format!("{name}#{n}")
            }
        })
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-(cell type, perturbation) metric values averaged over seeds, in key
/// order; populations where the metric is missing in every seed are left out.
fn per_perturbation(reports: &[&MetricsReport], metric: &str) -> Vec<f64> {
    let mut acc: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for r in reports {
        for row in &r.rows {
            if let Some(v) = row.get(metric) {
                let e = acc.entry((row.cell_type.as_str(), row.perturbation.as_str())).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.values().map(|(s, n)| s / *n as f64).collect()
}

/// Trains and tests every config under every seed, then runs Mann-Whitney
/// tests of each model against the reference (the first `pt_rag` config,
/// else the first config) with Benjamini-Hochberg correction across all
/// model pairs and metrics.
pub fn compare(
    configs: &[TrainConfig],
    dataset: &Dataset,
    db: &PerturbationDb,
    pca: &PcaBasis,
    seeds: &[u64],
) -> Result<(CompareReport, Vec<Vec<TrainOutcome>>)> {
    if configs.len() < 2 {
        return Err(contract("compare needs at least 2 configs"));
    }
    if seeds.is_empty() {
        return Err(contract("compare needs at least one seed"));
    }
    let mut runs = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut per_cfg = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            per_cfg.push(train_and_evaluate(&c, dataset, db, pca)?);
        }
        runs.push(per_cfg);
    }
    let report = significance(configs, &runs, seeds)?;
    Ok((report, runs))
}

/// Significance analysis over finished runs (`runs[config][seed]`).
pub fn significance(configs: &[TrainConfig], runs: &[Vec<TrainOutcome>], seeds: &[u64]) -> Result<CompareReport> {
    let labels = labels(configs);
    let reference = configs.iter().position(|c| c.model_kind == ModelKind::PtRag).unwrap_or(0);
    let reports: Vec<Vec<&MetricsReport>> = runs
        .iter()
        .map(|r| {
            r.iter()
                .map(|o| o.record.final_metrics.as_ref().ok_or_else(|| contract("run has no test metrics")))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let models = configs
        .iter()
        .zip(&labels)
        .zip(&reports)
        .map(|((cfg, label), reps)| {
            let mut per_seed = BTreeMap::new();
            let mut med = BTreeMap::new();
            let mut mean = BTreeMap::new();
            for m in COMPARED_METRICS.iter().chain(std::iter::once(&"w2_root")) {
                let mut vals: Vec<f64> = reps.iter().filter_map(|r| r.overall(m).map(|s| s.mean)).collect();
                per_seed.insert(m.to_string(), vals.clone());
                med.insert(m.to_string(), median(&mut vals));
                let samples = per_perturbation(reps, m);
                if !samples.is_empty() {
                    mean.insert(m.to_string(), samples.iter().sum::<f64>() / samples.len() as f64);
                }
            }
            ModelSummary {
                label: label.clone(),
                kind: cfg.model_kind,
                seeds: seeds.to_vec(),
                per_seed,
                median: med,
                mean,
            }
        })
        .collect();

    let mut entries = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        if i == reference {
            continue;
        }
        for metric in COMPARED_METRICS {
            let a = per_perturbation(&reports[reference], metric);
            let b = per_perturbation(&reports[i], metric);
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let t = mann_whitney_u(&a, &b)?;
            entries.push(SignificanceEntry {
                reference: labels[reference].clone(),
                model: label.clone(),
                metric: metric.to_string(),
                u: t.u_statistic,
                method: t.method,
                p_raw: t.p_two_sided,
                p_fdr: f64::NAN,
                marker: String::new(),
                n_reference: a.len(),
                n_model: b.len(),
            });
        }
    }
    let raw: Vec<f64> = entries.iter().map(|e| e.p_raw).collect();
    let fdr = benjamini_hochberg(&raw, 0.05)?;
    for (e, q) in entries.iter_mut().zip(fdr.adjusted_p) {
        e.p_fdr = q;
        e.marker = significance_marker(q).to_string();
    }
    Ok(CompareReport { reference: labels[reference].clone(), seeds: seeds.to_vec(), models, entries })
}
