//! Training loop, held-out evaluation and the experiment drivers built on
//! top of them.

mod analysis;
mod compare;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{config, contract, Error, Result};
use crate::metrics::{evaluate_population, fit_pca_auto, MetricsReport, PcaBasis};
use crate::model::{combine_losses, sample_loss, LossBreakdown, Model, ModelConfig, ModelKind};
use crate::nn::{AdamConfig, AdamState, ParamStore};
use crate::retrieval::PerturbationDb;
use crate::rng::SplitMix64;
use crate::selector::GumbelNoise;
use crate::synthdata::{Dataset, Split};

pub use analysis::{
    chance_overlap, jaccard_analysis, selection_sets, sweep, JaccardReport, SweepAxis, SweepEntry,
    SweepReport,
};
pub use compare::{compare, significance, CompareReport, ModelSummary, SignificanceEntry, COMPARED_METRICS};

pub const CONFIG_SCHEMA: u32 = 1;

fn default_schema() -> u32 {
    CONFIG_SCHEMA
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub model_kind: ModelKind,
    pub max_steps: usize,
    pub validate_every: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_sparse: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub tau: f64,
    pub seed: u64,
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub score_hidden: usize,
    pub include_bias: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema_version: CONFIG_SCHEMA,
            model_kind: ModelKind::PtRag,
            max_steps: 2000,
            validate_every: 200,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 5e-4,
            lambda_sparse: 0.1,
            k: 8,
            tau: 0.5,
            seed: 0,
            d: 32,
            depth: 1,
            heads: 2,
            score_hidden: 128,
            include_bias: 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(config("schema_version", format!("== {CONFIG_SCHEMA}")));
        }
        for (key, v) in [
            ("max_steps", self.max_steps),
            ("validate_every", self.validate_every),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(config(key, "> 0"));
            }
        }
        if self.validate_every > self.max_steps {
            return Err(config("validate_every", "<= max_steps"));
        }
        // lr = 0 is accepted as a frozen run
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config("lr", "lr > 0 (or lr = 0 to freeze parameters)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config("weight_decay", ">= 0"));
        }
        Ok(())
    }

    /// Model hyperparameters for the dataset's dimensions.
    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        let c = &dataset.config;
        ModelConfig {
            kind: self.model_kind,
            d: self.d,
            genes: c.genes,
            embed_dim: c.embed_dim,
            num_perturbations: c.num_perturbations,
            k: self.k,
            tau: self.tau,
            lambda_sparse: self.lambda_sparse,
            depth: self.depth,
            heads: self.heads,
            score_hidden: self.score_hidden,
            include_bias: self.include_bias,
            seed: self.seed,
        }
    }

    pub fn build_model(&self, dataset: &Dataset) -> Result<Model> {
        self.validate()?;
        Model::new(self.model_config(dataset))
    }
}

/// Losses over one validation window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub step: usize,
    /// Mean training breakdown over the steps since the previous entry.
    pub train: LossBreakdown,
    /// Mean validation energy distance (deterministic selection).
    pub val_dist: f64,
    /// Mean included candidates per cell on the validation split.
    pub val_selected_count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    /// Breakdown of the very first training batch, before any update.
    pub initial: LossBreakdown,
    pub validations: Vec<ValidationEntry>,
    pub best_step: usize,
    pub best_val_dist: f64,
    pub final_metrics: Option<MetricsReport>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Equality ignoring the wall-clock field.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = 0.0;
        let mut b = other.clone();
        b.wall_clock_secs = 0.0;
        a == b
    }

    pub fn final_selected_count(&self) -> f64 {
        self.validations.last().map_or(0.0, |v| v.val_selected_count)
    }

    /// Mean included candidates per cell under sampled Gumbel noise over the
    /// last validation window of training.
    pub fn final_sampled_selected_count(&self) -> f64 {
        self.validations.last().map_or(0.0, |v| v.train.selected_count)
    }
}

/// Trained model (best validation checkpoint) and its record.
pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
}

/// Mean loss over a set of samples with deterministic selection.
pub fn mean_loss(model: &Model, dataset: &Dataset, db: &PerturbationDb, samples: &[usize]) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(contract("no samples to score"));
    }
    let mut acc = LossBreakdown { total: 0.0, dist: 0.0, sparse: 0.0, selected_count: 0.0 };
    for &i in samples {
        let s = &dataset.samples[i];
        let tape = Tape::new();
        let p = model.store.bind_frozen(&tape);
        let f = model.forward(&tape, &p, &s.x_ctrl, s.pert_index, db, GumbelNoise::Zero)?;
        let part = sample_loss(&tape, f.prediction, &s.x_pert, f.selection.as_ref())?;
        let (_, b) = combine_losses(&tape, &[part], model.config.lambda_sparse)?;
        acc.total += b.total;
        acc.dist += b.dist;
        acc.sparse += b.sparse;
        acc.selected_count += b.selected_count;
    }
    let n = samples.len() as f64;
    Ok(LossBreakdown {
        total: acc.total / n,
        dist: acc.dist / n,
        sparse: acc.sparse / n,
        selected_count: acc.selected_count / n,
    })
}

/// Cycles through a shuffled index list, reshuffling after each pass.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: SplitMix64,
}

impl BatchSampler {
    fn new(indices: Vec<usize>, rng: SplitMix64) -> Self {
        let mut s = BatchSampler { order: indices, pos: 0, rng };
        s.rng.shuffle(&mut s.order);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Minibatch Adam on `dist + lambda * sparse`, keeping the parameters with
/// the lowest validation energy distance.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, db: &PerturbationDb) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut model = cfg.build_model(dataset)?;
    let train_idx = dataset.split_indices(Split::Train);
    let val_idx = dataset.split_indices(Split::Val);
    if train_idx.is_empty() {
        return Err(contract("training split is empty"));
    }
    if val_idx.is_empty() {
        return Err(contract("validation split is empty"));
    }
    let mut adam = AdamState::new(AdamConfig::new(cfg.lr, cfg.weight_decay), &model.store);
    let mut sampler = BatchSampler::new(train_idx, SplitMix64::derive(cfg.seed, 0xba7c));
    let mut noise_rng = SplitMix64::derive(cfg.seed, 0x6b3e);

    let mut initial = None;
    let mut window = Vec::with_capacity(cfg.validate_every);
    let mut validations = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for step in 1..=cfg.max_steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let tape = Tape::new();
        let binding = model.store.bind(&tape);
        let mut parts = Vec::with_capacity(batch.len());
        for &i in &batch {
            let s = &dataset.samples[i];
            let f = model.forward(&tape, &binding, &s.x_ctrl, s.pert_index, db, GumbelNoise::Sample(&mut noise_rng))?;
            parts.push(sample_loss(&tape, f.prediction, &s.x_pert, f.selection.as_ref())?);
        }
        let (total, b) = combine_losses(&tape, &parts, cfg.lambda_sparse)?;
        if ![b.total, b.dist, b.sparse].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss { step, total: b.total, dist: b.dist, sparse: b.sparse });
        }
        initial.get_or_insert(b);
        window.push(b);
        let grads = tape.backward(total)?;
        model.store.accumulate(&binding, &grads);
        adam.step(&mut model.store)?;

        if step % cfg.validate_every == 0 {
            let val = mean_loss(&model, dataset, db, &val_idx)?;
            let n = window.len() as f64;
            let mean = |f: fn(&LossBreakdown) -> f64| window.iter().map(f).sum::<f64>() / n;
            validations.push(ValidationEntry {
                step,
                train: LossBreakdown {
                    total: mean(|b| b.total),
                    dist: mean(|b| b.dist),
                    sparse: mean(|b| b.sparse),
                    selected_count: mean(|b| b.selected_count),
                },
                val_dist: val.dist,
                val_selected_count: val.selected_count,
            });
            window.clear();
            if !val.dist.is_finite() {
                return Err(Error::NonFiniteLoss { step, total: val.total, dist: val.dist, sparse: val.sparse });
            }
            if best.as_ref().is_none_or(|(d, _, _)| val.dist < *d) {
                best = Some((val.dist, step, model.store.clone()));
            }
        }
    }
    let (best_val_dist, best_step, store) = best.expect("at least one validation");
    model.store = store;
    let record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        initial: initial.expect("at least one step"),
        validations,
        best_step,
        best_val_dist,
        final_metrics: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { model, record })
}

/// PCA basis for distributional metrics, fitted on training cells only
/// (control and perturbed populations of the training split).
pub fn evaluation_pca(dataset: &Dataset) -> Result<PcaBasis> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for s in dataset.split(Split::Train) {
        for t in [&s.x_ctrl, &s.x_pert] {
            rows.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
    }
    if rows.is_empty() {
        return Err(contract("training split is empty"));
    }
    fit_pca_auto(&Tensor::from_rows(&rows)?, "train")
}

/// Metrics for every sample of `split`, with deterministic selection.
pub fn evaluate(model: &Model, dataset: &Dataset, db: &PerturbationDb, split: Split, pca: &PcaBasis) -> Result<MetricsReport> {
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Err(contract(format!("{} split is empty", split.name())));
    }
    let mut rng = SplitMix64::derive(model.config.seed, 0xe7a1);
    let mut rows = Vec::with_capacity(idx.len());
    for i in idx {
        let s = &dataset.samples[i];
        let (pred, _) = model.predict(&s.x_ctrl, s.pert_index, db, GumbelNoise::Zero)?;
        rows.push(evaluate_population(&s.pert_id, &s.cell_type, &s.x_ctrl, &pred, &s.x_pert, pca, &mut rng)?);
    }
    rows.sort_by(|a, b| (&a.cell_type, &a.perturbation).cmp(&(&b.cell_type, &b.perturbation)));
    Ok(MetricsReport::new(model.config.kind.name(), model.config.seed, pca.q(), rows))
}

/// Rebuilds a trained model from its config and checkpoint parameters.
pub fn restore(cfg: &TrainConfig, dataset: &Dataset, params: &ParamStore) -> Result<Model> {
    let mut model = cfg.build_model(dataset)?;
    model.store.load_values_from(params)?;
    Ok(model)
}

/// Train, then score the test split with the best checkpoint.
pub fn train_and_evaluate(
    cfg: &TrainConfig,
    dataset: &Dataset,
    db: &PerturbationDb,
    pca: &PcaBasis,
) -> Result<TrainOutcome> {
    let mut out = train(cfg, dataset, db)?;
    out.record.final_metrics = Some(evaluate(&out.model, dataset, db, Split::Test, pca)?);
    Ok(out)
}
