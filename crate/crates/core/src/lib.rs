//! Differentiable two-stage retrieval-augmented generation for
//! single-cell perturbation response prediction.
//!
//! The crate bundles everything needed to train and evaluate the model and
//! its baselines at desk scale: a small reverse-mode autodiff engine, neural
//! building blocks, exact cosine retrieval, straight-through Gumbel-Softmax
//! selection, the evaluation metric suite, rank-based significance testing
//! and a synthetic Perturb-seq-like data generator.

pub mod autodiff;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod rng;
pub mod selector;
pub mod stats;
pub mod synthdata;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use rng::SplitMix64;
