//! Neural building blocks and the Adam optimizer.

mod adam;
mod layers;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use layers::{
    layer_norm, LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerBlock, TransformerGenerator,
    LAYER_NORM_EPS,
};
pub use params::{uniform_init, Binding, ParamId, ParamStore};
