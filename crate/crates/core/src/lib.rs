//! Denoised graph collaborative filtering with order-wise signal decoupling.
//!
//! The pipeline is:
//!
//! 1. [`data`]: load implicit-feedback interactions, split 7:1:2, optionally
//!    inject synthetic noise into the training set, sample BPR triples.
//! 2. [`graph`]: build the symmetric user–item adjacency and the sparse
//!    algebra used everywhere else.
//! 3. [`decouple`]: split the adjacency into per-order matrices whose entries
//!    exist only at shortest distance exactly `l`, valued by walk counts.
//! 4. [`model`]: per-order hidden states, similarity-driven Gumbel masks,
//!    denoised normalized adjacencies, order-isolated propagation, pooling.
//! 5. [`train`]: BPR + denoising + L2 loss, exact gradients, Adam, early stopping.
//! 6. [`eval`]: full-ranking Recall/NDCG/Precision@K.

pub mod data;
pub mod decouple;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
