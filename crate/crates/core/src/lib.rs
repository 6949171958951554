//! One-shot, non-autoregressive personalized bundle generation.
//!
//! The pipeline: BPR matrix-factorization preference embeddings, a
//! co-occurrence graph encoded by a weighted-aggregation GNN, an attention
//! encoder over the candidate list, and a decoder that pools the encoder
//! output into a single query and projects it to one distribution over the
//! whole item vocabulary. A bundle is the top-k of that distribution
//! restricted to the candidates.

pub mod checkpoint;
pub mod compat_graph;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod par;
pub mod pretrain;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
