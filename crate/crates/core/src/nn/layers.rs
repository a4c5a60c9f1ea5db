use serde::{Deserialize, Serialize};

use super::params::{uniform_init, Binding, ParamId, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::rng::SplitMix64;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn check_cols(tape: &Tape, x: Var, expected: usize, op: &'static str) -> Result<()> {
    let v = tape.value(x);
    if v.shape().len() != 2 || v.cols() != expected {
        return Err(Error::Shape {
            op,
            lhs: v.shape().to_vec(),
            rhs: vec![v.rows(), expected],
        });
    }
    Ok(())
}

/// `x W + b` with `W: [in x out]`; the bias is optional.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let w = uniform_init(rng, in_dim, &[in_dim, out_dim]);
        Self::with_values(store, name, w, Tensor::zeros(&[out_dim]))
    }

    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let w = uniform_init(rng, in_dim, &[in_dim, out_dim]);
        Ok(Self {
            weight: store.register(format!("{name}.weight"), w)?,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    pub fn with_values(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.cols()] {
            return Err(Error::Shape {
                op: "linear_init",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (in_dim, out_dim) = (weight.rows(), weight.cols());
        Ok(Self {
            weight: store.register(format!("{name}.weight"), weight)?,
            bias: Some(store.register(format!("{name}.bias"), bias)?),
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &Tape, p: &Binding, x: Var) -> Result<Var> {
        check_cols(tape, x, self.in_dim, "linear")?;
        let h = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add(h, p.var(b)),
            None => Ok(h),
        }
    }
}

/// Row-wise normalization followed by `gamma * x + beta`.
pub fn layer_norm(tape: &Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
    let scaled = tape.mul(n, gamma)?;
    tape.add(scaled, beta)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(contract("layer norm dimension must be at least 1"));
        }
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            dim,
        })
    }

    pub fn forward(&self, tape: &Tape, p: &Binding, x: Var) -> Result<Var> {
        check_cols(tape, x, self.dim, "layer_norm")?;
        layer_norm(tape, x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Stack of linear layers with ReLU between them, and optionally after the
/// last one.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        final_relu: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(contract("an MLP needs at least input and output dims"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, final_relu })
    }

    pub fn forward(&self, tape: &Tape, p: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i < last || self.final_relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs (self-attention passes the same var twice). Projections
/// carry no bias; a key bias would only shift every score of a row equally.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(contract(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::without_bias(store, &format!("{name}.q"), dim, dim, rng)?,
            key: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng)?,
            value: Linear::without_bias(store, &format!("{name}.v"), dim, dim, rng)?,
            output: Linear::without_bias(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `queries: [n x d]`, `context: [K x d]` -> `[n x d]`.
    pub fn forward(&self, tape: &Tape, p: &Binding, queries: Var, context: Var) -> Result<Var> {
        if tape.value(context).rows() == 0 || tape.value(context).is_empty() {
            return Err(contract("empty context"));
        }
        let q = self.query.forward(tape, p, queries)?;
        let k = self.key.forward(tape, p, context)?;
        let v = self.value.forward(tape, p, context)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.output.forward(tape, p, merged)
    }
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + ff(ln2(x))` with a ReLU
/// feed-forward of width `4d`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: Mlp,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff: Mlp::new(
                store,
                &format!("{name}.ff"),
                &[dim, 4 * dim, dim],
                false,
                rng,
            )?,
        })
    }

    pub fn forward(&self, tape: &Tape, p: &Binding, x: Var) -> Result<Var> {
        let h = self.norm_attn.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, h)?;
        let x = tape.add(x, a)?;
        let h = self.norm_ff.forward(tape, p, x)?;
        let f = self.ff.forward(tape, p, h)?;
        tape.add(x, f)
    }
}

/// Transformer stack over the cells of one population (no positional
/// encoding, no mask) followed by a linear readout to gene space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerGenerator {
    pub blocks: Vec<TransformerBlock>,
    pub readout: Linear,
}

impl TransformerGenerator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        genes: usize,
        depth: usize,
        heads: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), dim, heads, rng))
            .collect::<Result<_>>()?;
        let readout = Linear::new(store, &format!("{name}.readout"), dim, genes, rng)?;
        Ok(Self { blocks, readout })
    }

    /// `z: [S x d]` -> `[S x G]`.
    pub fn forward(&self, tape: &Tape, p: &Binding, z: Var) -> Result<Var> {
        let mut h = z;
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
        }
        self.readout.forward(tape, p, h)
    }
}
