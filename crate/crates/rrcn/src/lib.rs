//! Reciprocal link prediction on attributed bipartite graphs with
//! reinforced random convolutional networks (RRCN).
//!
//! The crate is organized around the pipeline:
//!
//! - [`tensor`]: dense f64 tensors with tape-based reverse-mode
//!   differentiation, exposing exact gradients at interior nodes.
//! - [`graph`]: the attributed bipartite message graph, preferred /
//!   repulsive set derivation, dataset splitting with negative sampling,
//!   CSV ingestion, and a synthetic generator with planted rules.
//! - [`embed`]: attribute embeddings, soft attention over user sets, and
//!   the channel-wise outer-product interaction tensors.
//! - [`conv`]: the convolution family over interaction tensors
//!   (conventional / dilated / random / policy-driven), row-wise max
//!   pooling, and multi-dimension attention across kernel sizes.
//! - [`policy`]: the selection policy network, sequential action
//!   sampling, gradient-derived rewards, and REINFORCE updates.
//! - [`model`]: end-to-end model assembly, training with Adam and
//!   interleaved policy updates, metrics, the ablation harness,
//!   case-study tracing, and the enumeration oracle.

pub mod config;
pub mod conv;
pub mod embed;
pub mod graph;
pub mod model;
pub mod policy;
pub mod rng;
pub mod tensor;
