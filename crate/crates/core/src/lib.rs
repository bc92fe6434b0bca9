//! Core library for studying brute-force attacks on transfer-learned
//! classifiers and their defenses.
//!
//! The pieces compose a full experiment pipeline:
//!
//! * [`net`] — a minimal differentiable feed-forward network (dense / relu /
//!   lightweight conv / softmax head) with backpropagation to parameters
//!   (training) and to the input (attacks), Adam, and a checksummed binary
//!   model format;
//! * [`data`] — IDX file ingestion, a procedurally generated image corpus,
//!   and seeded class partitioning/subsampling;
//! * [`pipeline`] — teacher training, feature-extractor extraction, and
//!   student re-training variants (deeper tuning, extra layers, reject
//!   class);
//! * [`attack`] — per-neuron gradient-descent input crafting and the
//!   brute-force query loop;
//! * [`defense`] — activation-threshold detection and an extreme-value
//!   machine over activation-space margins;
//! * [`metrics`] — NABAC, effectiveness, trigger histograms, Jensen-Shannon
//!   distance analysis, the baseline random attack, and the experiment
//!   sweep runner.
//!
//! Numeric code is generic over the scalar type through [`scalar::Real`]
//! (`f32` or `f64`); the aliases below fix the crate-wide default of `f64`,
//! which every experiment entry point uses.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};

/// Default-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision network.
pub type Network = net::Network<f64>;
/// Default-precision forward trace.
pub type ForwardTrace = net::ForwardTrace<f64>;
/// Default-precision Adam state.
pub type AdamState = net::AdamState<f64>;
/// Default-precision per-layer gradients.
pub type GradientSet = net::GradientSet<f64>;
