//! The generation baselines, fixed-retrieval RAG and the two-stage
//! differentiable RAG model, plus the training objective.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{config, contract, Error, Result};
use crate::metrics::energy_distance_var;
use crate::nn::{
    Binding, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore, TransformerGenerator,
};
use crate::retrieval::PerturbationDb;
use crate::rng::SplitMix64;
use crate::selector::{gumbel_softmax_select, GumbelNoise, Selection, INCLUDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Generation only; perturbations encoded from one-hot identity.
    State,
    /// Generation only; perturbations encoded from their embeddings.
    StateGenept,
    /// Fixed top-K retrieval fused by cross-attention.
    VanillaRag,
    /// Top-K retrieval followed by learned per-cell selection.
    PtRag,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::State,
        ModelKind::StateGenept,
        ModelKind::VanillaRag,
        ModelKind::PtRag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::State => "state",
            ModelKind::StateGenept => "state_genept",
            ModelKind::VanillaRag => "vanilla_rag",
            ModelKind::PtRag => "pt_rag",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn retrieves(self) -> bool {
        matches!(self, ModelKind::VanillaRag | ModelKind::PtRag)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_score_hidden() -> usize {
    128
}

fn default_include_bias() -> f64 {
    3.0
}

/// Architecture and selection hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d: usize,
    #[serde(rename = "G")]
    pub genes: usize,
    #[serde(rename = "E")]
    pub embed_dim: usize,
    #[serde(rename = "P")]
    pub num_perturbations: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub tau: f64,
    pub lambda_sparse: f64,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_score_hidden")]
    pub score_hidden: usize,
    /// Initial include-minus-exclude logit of the scorer.
    #[serde(default = "default_include_bias")]
    pub include_bias: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("G", self.genes),
            ("E", self.embed_dim),
            ("P", self.num_perturbations),
            ("heads", self.heads),
            ("score_hidden", self.score_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(config(key, "> 0"));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(config("heads", format!("divide d = {}", self.d)));
        }
        if self.kind.retrieves() && (self.k == 0 || self.k >= self.num_perturbations) {
            return Err(config(
                "K",
                format!(
                    "1 <= K <= P - 1 = {}",
                    self.num_perturbations.saturating_sub(1)
                ),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config("tau", "> 0"));
        }
        if !(self.lambda_sparse >= 0.0 && self.lambda_sparse.is_finite()) {
            return Err(config("lambda_sparse", ">= 0"));
        }
        if !self.include_bias.is_finite() {
            return Err(config("include_bias", "finite"));
        }
        Ok(())
    }
}

/// Fixed random projection from gene space to the model dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenCellEncoder {
    pub projection: Tensor,
}

impl FrozenCellEncoder {
    pub fn new(genes: usize, d: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::derive(seed, 0xce11);
        let scale = 1.0 / (genes as f64).sqrt();
        let data = (0..genes * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            projection: Tensor::matrix(genes, d, data).expect("shape"),
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.projection)
    }
}

/// How the PT-RAG aggregation weights are obtained.
#[derive(Clone, Copy, Debug)]
pub enum SelectMode<'a> {
    /// Hard mask forward, soft gradient (training and evaluation).
    StraightThrough,
    /// Soft include probabilities as weights; the smooth surrogate network.
    Soft,
    /// Caller-fixed hard mask `[S x K]`.
    Forced(&'a Tensor),
}

/// One forward pass.
pub struct Forward {
    /// `[S x G]`.
    pub prediction: Var,
    pub selection: Option<Selection>,
    /// Stage-one candidates (database indices) for retrieval models.
    pub candidates: Vec<usize>,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: FrozenCellEncoder,
    pub pert_encoder: Linear,
    pub attention: Option<MultiHeadAttention>,
    pub triplet_norm: Option<LayerNorm>,
    pub score: Option<Mlp>,
    pub proj: Option<Linear>,
    pub generator: TransformerGenerator,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = SplitMix64::derive(c.seed, 0x1417);
        let mut store = ParamStore::new();
        let pert_in = if c.kind == ModelKind::State {
            c.num_perturbations
        } else {
            c.embed_dim
        };
        let pert_encoder = Linear::new(&mut store, "pert_encoder", pert_in, c.d, &mut rng)?;
        let attention = match c.kind {
            ModelKind::VanillaRag => Some(MultiHeadAttention::new(
                &mut store,
                "cross_attn",
                c.d,
                c.heads,
                &mut rng,
            )?),
            _ => None,
        };
        let (triplet_norm, score, proj) = if c.kind == ModelKind::PtRag {
            let norm = LayerNorm::new(&mut store, "triplet_norm", 3 * c.d)?;
            let score = Mlp::new(
                &mut store,
                "score",
                &[3 * c.d, c.score_hidden, 2],
                false,
                &mut rng,
            )?;
            let last = score
                .layers
                .last()
                .and_then(|l| l.bias)
                .expect("score bias");
            store.get_mut(last).data_mut()[INCLUDE] = c.include_bias;
            let proj = Linear::new(&mut store, "proj", 3 * c.d, c.d, &mut rng)?;
            (Some(norm), Some(score), Some(proj))
        } else {
            (None, None, None)
        };
        let generator = TransformerGenerator::new(
            &mut store,
            "generator",
            c.d,
            c.genes,
            c.depth,
            c.heads,
            &mut rng,
        )?;
        let encoder = FrozenCellEncoder::new(c.genes, c.d, c.seed);
        Ok(Model {
            config,
            store,
            encoder,
            pert_encoder,
            attention,
            triplet_norm,
            score,
            proj,
            generator,
        })
    }

    fn check_inputs(&self, x_ctrl: &Tensor, pert: usize, db: &PerturbationDb) -> Result<()> {
        if x_ctrl.shape().len() != 2 || x_ctrl.cols() != self.config.genes || x_ctrl.rows() == 0 {
            return Err(Error::Shape {
                op: "model_input",
                lhs: x_ctrl.shape().to_vec(),
                rhs: vec![x_ctrl.rows(), self.config.genes],
            });
        }
        if db.dim() != self.config.embed_dim || db.len() != self.config.num_perturbations {
            return Err(contract(format!(
                "database is {} x {}, model expects {} x {}",
                db.len(),
                db.dim(),
                self.config.num_perturbations,
                self.config.embed_dim
            )));
        }
        if pert >= db.len() {
            return Err(contract(format!("perturbation index {pert} out of range")));
        }
        Ok(())
    }

    fn encode_cells(&self, tape: &Tape, x_ctrl: &Tensor) -> Result<Var> {
        Ok(tape.constant(self.encoder.encode(x_ctrl)?))
    }

    /// `[1 x d]` encoding of the query perturbation.
    fn encode_query(
        &self,
        tape: &Tape,
        p: &Binding,
        pert: usize,
        db: &PerturbationDb,
    ) -> Result<Var> {
        let input = if self.config.kind == ModelKind::State {
            let mut onehot = vec![0.0; self.config.num_perturbations];
            onehot[pert] = 1.0;
            Tensor::matrix(1, onehot.len(), onehot)?
        } else {
            Tensor::matrix(1, db.dim(), db.embedding(pert).to_vec())?
        };
        self.pert_encoder.forward(tape, p, tape.constant(input))
    }

    fn encode_contexts(
        &self,
        tape: &Tape,
        p: &Binding,
        candidates: &[usize],
        db: &PerturbationDb,
    ) -> Result<Var> {
        let raw = db.embeddings().select_rows(candidates);
        self.pert_encoder.forward(tape, p, tape.constant(raw))
    }

    /// Generation from `z = h_ctrl + h_pert`.
    pub fn forward_state(
        &self,
        tape: &Tape,
        p: &Binding,
        x_ctrl: &Tensor,
        pert: usize,
        db: &PerturbationDb,
    ) -> Result<Var> {
        self.check_inputs(x_ctrl, pert, db)?;
        let h_ctrl = self.encode_cells(tape, x_ctrl)?;
        let h_pert = self.encode_query(tape, p, pert, db)?;
        let z = tape.add(h_ctrl, h_pert)?;
        self.generator.forward(tape, p, z)
    }

    /// Cross-attention from `h_ctrl + h_pert` onto the fixed top-K contexts;
    /// the attention output replaces the query as the generator input.
    pub fn forward_vanilla_rag(
        &self,
        tape: &Tape,
        p: &Binding,
        x_ctrl: &Tensor,
        pert: usize,
        db: &PerturbationDb,
    ) -> Result<(Var, Vec<usize>)> {
        self.check_inputs(x_ctrl, pert, db)?;
        let attn = self
            .attention
            .as_ref()
            .ok_or_else(|| contract("model has no cross-attention"))?;
        let candidates = db.top_k_by_index(pert, self.config.k)?.candidate_indices;
        let h_ctrl = self.encode_cells(tape, x_ctrl)?;
        let h_pert = self.encode_query(tape, p, pert, db)?;
        let q = tape.add(h_ctrl, h_pert)?;
        let ctx = self.encode_contexts(tape, p, &candidates, db)?;
        let z = attn.forward(tape, p, q, ctx)?;
        Ok((self.generator.forward(tape, p, z)?, candidates))
    }

    /// Per-cell triplets `[h_ctrl; h_pert; h_k]`, scored, masked and summed.
    pub fn forward_pt_rag(
        &self,
        tape: &Tape,
        p: &Binding,
        x_ctrl: &Tensor,
        pert: usize,
        db: &PerturbationDb,
        noise: GumbelNoise<'_>,
        mode: SelectMode<'_>,
    ) -> Result<(Var, Selection, Vec<usize>)> {
        self.check_inputs(x_ctrl, pert, db)?;
        let (Some(norm), Some(score), Some(proj)) = (&self.triplet_norm, &self.score, &self.proj)
        else {
            return Err(contract("model has no selection head"));
        };
        let (s, k) = (x_ctrl.rows(), self.config.k);
        let candidates = db.top_k_by_index(pert, k)?.candidate_indices;
        let h_ctrl = self.encode_cells(tape, x_ctrl)?;
        let h_pert = self.encode_query(tape, p, pert, db)?;
        let h_ctx = self.encode_contexts(tape, p, &candidates, db)?;

        let cell_rows: Vec<usize> = (0..s * k).map(|r| r / k).collect();
        let ctx_rows: Vec<usize> = (0..s * k).map(|r| r % k).collect();
        let triplets = tape.concat_cols(&[
            tape.gather_rows(h_ctrl, &cell_rows)?,
            tape.gather_rows(h_pert, &vec![0; s * k])?,
            tape.gather_rows(h_ctx, &ctx_rows)?,
        ])?;
        let logits = score.forward(tape, p, norm.forward(tape, p, triplets)?)?;
        let selection = gumbel_softmax_select(tape, logits, s, self.config.tau, noise)?;
        let weights = match mode {
            SelectMode::StraightThrough => selection.weights,
            SelectMode::Soft => selection.soft,
            SelectMode::Forced(mask) => {
                if mask.shape() != [s, k] {
                    return Err(Error::Shape {
                        op: "forced_mask",
                        lhs: mask.shape().to_vec(),
                        rhs: vec![s, k],
                    });
                }
                tape.constant(mask.clone().reshape(vec![s * k, 1])?)
            }
        };
        let projected = tape.relu(proj.forward(tape, p, triplets)?);
        let weighted = tape.mul(projected, weights)?;
        let z = tape.matmul(tape.constant(aggregation_matrix(s, k)), weighted)?;
        Ok((self.generator.forward(tape, p, z)?, selection, candidates))
    }

    /// Dispatches on the model kind.
    pub fn forward(
        &self,
        tape: &Tape,
        p: &Binding,
        x_ctrl: &Tensor,
        pert: usize,
        db: &PerturbationDb,
        noise: GumbelNoise<'_>,
    ) -> Result<Forward> {
        match self.config.kind {
            ModelKind::State | ModelKind::StateGenept => Ok(Forward {
                prediction: self.forward_state(tape, p, x_ctrl, pert, db)?,
                selection: None,
                candidates: Vec::new(),
            }),
            ModelKind::VanillaRag => {
                let (prediction, candidates) =
                    self.forward_vanilla_rag(tape, p, x_ctrl, pert, db)?;
                Ok(Forward {
                    prediction,
                    selection: None,
                    candidates,
                })
            }
            ModelKind::PtRag => {
                let (prediction, selection, candidates) = self.forward_pt_rag(
                    tape,
                    p,
                    x_ctrl,
                    pert,
                    db,
                    noise,
                    SelectMode::StraightThrough,
                )?;
                Ok(Forward {
                    prediction,
                    selection: Some(selection),
                    candidates,
                })
            }
        }
    }

    /// Prediction without gradients.
    pub fn predict(
        &self,
        x_ctrl: &Tensor,
        pert: usize,
        db: &PerturbationDb,
        noise: GumbelNoise<'_>,
    ) -> Result<(Tensor, Option<Selection>)> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let f = self.forward(&tape, &p, x_ctrl, pert, db, noise)?;
        let pred = tape.value(f.prediction).clone();
        Ok((pred, f.selection))
    }
}

/// `[S x (S*K)]` block matrix summing each cell's `K` rows.
fn aggregation_matrix(s: usize, k: usize) -> Tensor {
    let mut data = vec![0.0; s * s * k];
    for i in 0..s {
        for j in 0..k {
            data[i * s * k + i * k + j] = 1.0;
        }
    }
    Tensor::matrix(s, s * k, data).expect("shape")
}

/// Scalar components of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dist: f64,
    pub sparse: f64,
    pub selected_count: f64,
}

/// Loss terms of one population on the tape.
pub struct SampleLoss {
    pub dist: Var,
    /// Mean include weight; `None` for models without selection.
    pub sparse: Option<Var>,
    pub selected_count: f64,
}

/// Energy distance to the observed cells plus the selection rate.
pub fn sample_loss(
    tape: &Tape,
    prediction: Var,
    target: &Tensor,
    selection: Option<&Selection>,
) -> Result<SampleLoss> {
    let (s, pred_shape) = {
        let v = tape.value(prediction);
        (v.rows(), v.shape().to_vec())
    };
    if pred_shape != target.shape() {
        return Err(Error::Shape {
            op: "loss",
            lhs: pred_shape,
            rhs: target.shape().to_vec(),
        });
    }
    if s < 2 {
        return Err(contract(format!(
            "energy loss needs at least 2 cells, got {s}"
        )));
    }
    let dist = energy_distance_var(tape, prediction, tape.constant(target.clone()))?;
    let (sparse, selected_count) = match selection {
        Some(sel) => (Some(tape.mean_all(sel.weights)), sel.mask.mean_selected()),
        None => (None, 0.0),
    };
    Ok(SampleLoss {
        dist,
        sparse,
        selected_count,
    })
}

/// Batch objective `mean(dist) + lambda * mean(sparse)`.
pub fn combine_losses(
    tape: &Tape,
    parts: &[SampleLoss],
    lambda_sparse: f64,
) -> Result<(Var, LossBreakdown)> {
    if parts.is_empty() {
        return Err(contract("empty batch"));
    }
    let inv = 1.0 / parts.len() as f64;
    let sum = |vars: Vec<Var>| -> Result<Var> {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = tape.add(acc, v)?;
        }
        Ok(tape.scale(acc, inv))
    };
    let dist = sum(parts.iter().map(|p| p.dist).collect())?;
    let sparse_vars: Vec<Var> = parts.iter().filter_map(|p| p.sparse).collect();
    let sparse = if sparse_vars.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        sum(sparse_vars)?
    };
    let total = tape.add(dist, tape.scale(sparse, lambda_sparse))?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        dist: tape.value(dist).item(),
        sparse: tape.value(sparse).item(),
        selected_count: parts.iter().map(|p| p.selected_count).sum::<f64>() * inv,
    };
    Ok((total, breakdown))
}

/// Single-population objective.
pub fn loss(
    tape: &Tape,
    prediction: Var,
    target: &Tensor,
    selection: Option<&Selection>,
    lambda_sparse: f64,
) -> Result<(Var, LossBreakdown)> {
    let part = sample_loss(tape, prediction, target, selection)?;
    combine_losses(tape, &[part], lambda_sparse)
}
