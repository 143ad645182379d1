//! Confidence scoring for classification results of any dimension, plus a
//! two-stage cascade built on top of it.
//!
//! The library has three layers:
//!
//! - [`mapping`] + [`tabnet`] + [`model`]: a confidence network that takes a
//!   classification probability vector of any dimension and returns the
//!   probability that the classification is correct. Sorting removes the
//!   category information, a restricted self-attention maps the sorted vector
//!   to a fixed dimension, and a sequential-attention regressor scores it.
//! - [`train`]: dataset construction from recorded classifier runs, seeded
//!   end-to-end training with hand-written reverse-mode gradients, gradient
//!   checking against finite differences, and the cross-validation protocol.
//! - [`cascade`]: threshold routing between a shallow and a deep model,
//!   FLOPs accounting, threshold sweeps, and the comparison baselines.
//!
//! File formats (run records, weights, tradeoff curves) live in [`io`]; a
//! synthetic paired-classifier generator for desk-scale experiments lives in
//! [`synth`]. See the `examples/` directory for one runnable example per
//! capability, and the `clcnet` binary for the command-line interface.

pub mod attention;
pub mod cascade;
pub mod error;
pub mod io;
pub mod mapping;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sparsemax;
pub mod synth;
pub mod tabnet;
pub mod train;

pub use error::{Error, Result};
pub use mapping::{
    attention_scores, gaussian_column, map_to_fixed_dim, normalize_probs, sort_desc,
    AttentionVector, MappedVector, MappingParams, ProbVector, SortedProbVector,
};
pub use model::{ConfidenceModel, ModelConfig};
pub use sparsemax::{sparsemax, sparsemax_backward};
